fn main() {
    std::process::exit(wavesr::cli::run());
}
