//! Single-level 2D Haar analysis/synthesis on whole images.
//!
//! A C-channel image becomes a [`WaveletPacket`] of 4C half-resolution
//! channels, packed band-major: LL, LH, HL, HH, each holding all C source
//! channels. The first band letter is the horizontal filter, the second
//! vertical. With `scale = true` every coefficient is halved after analysis
//! (and doubled before synthesis), so images in [-1, 1] produce packets in
//! [-1, 1] — the range the networks train in.

use crate::tensor::{dwt_chw, idwt_chw};
use crate::{Error, Result, Tensor};

/// The orthonormal Haar filter pair. Fixed, not configurable.
pub struct HaarFilters;

impl HaarFilters {
    pub const LOW: [f32; 2] = [std::f32::consts::FRAC_1_SQRT_2, std::f32::consts::FRAC_1_SQRT_2];
    pub const HIGH: [f32; 2] = [-std::f32::consts::FRAC_1_SQRT_2, std::f32::consts::FRAC_1_SQRT_2];
}

/// Sub-band order within a packet's channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Ll = 0,
    Lh = 1,
    Hl = 2,
    Hh = 3,
}

/// Channel-packed Haar sub-bands of a C-channel image: shape (4C, H/2, W/2).
#[derive(Clone, Debug)]
pub struct WaveletPacket {
    data: Vec<f32>,
    source_channels: usize,
    height: usize,
    width: usize,
    scaled: bool,
}

impl WaveletPacket {
    pub fn from_data(
        data: Vec<f32>,
        source_channels: usize,
        height: usize,
        width: usize,
        scaled: bool,
    ) -> Result<WaveletPacket> {
        let expected = 4 * source_channels * height * width;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "packet data length {} does not match 4x{source_channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(WaveletPacket { data, source_channels, height, width, scaled })
    }

    /// Total channel count (always 4 x source channels).
    pub fn channels(&self) -> usize {
        4 * self.source_channels
    }

    pub fn source_channels(&self) -> usize {
        self.source_channels
    }

    /// Packet height (half the source image height).
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scaled(&self) -> bool {
        self.scaled
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// All source channels of one sub-band, contiguous.
    pub fn band(&self, band: Band) -> &[f32] {
        let plane = self.source_channels * self.height * self.width;
        let start = band as usize * plane;
        &self.data[start..start + plane]
    }

    /// View as a single-sample NCHW tensor for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, self.channels(), self.height, self.width])
    }

    /// Rewraps network output of shape [1, 4C, H/2, W/2] as a packet.
    pub fn from_tensor(t: &Tensor, scaled: bool) -> Result<WaveletPacket> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] % 4 != 0 {
            return Err(Error::Shape(format!(
                "expected [1, 4C, H, W] tensor, got {:?}",
                s
            )));
        }
        WaveletPacket::from_data(t.to_vec(), s[1] / 4, s[2], s[3], scaled)
    }
}

/// Forward transform of a CHW image. With `scale`, coefficients are halved so
/// a [-1, 1] image yields a [-1, 1] packet.
pub fn dwt2d(image: &[f32], channels: usize, height: usize, width: usize, scale: bool) -> Result<WaveletPacket> {
    if channels == 0 {
        return Err(Error::Shape("dwt2d: image must have at least one channel".into()));
    }
    if height % 2 != 0 {
        return Err(Error::Shape(format!("dwt2d: height {height} is odd")));
    }
    if width % 2 != 0 {
        return Err(Error::Shape(format!("dwt2d: width {width} is odd")));
    }
    if image.len() != channels * height * width {
        return Err(Error::Shape(format!(
            "dwt2d: data length {} does not match {channels}x{height}x{width}",
            image.len()
        )));
    }
    let mut out = vec![0.0f32; image.len()];
    dwt_chw(image, channels, height, width, &mut out);
    if scale {
        for v in &mut out {
            *v *= 0.5;
        }
    }
    WaveletPacket::from_data(out, channels, height / 2, width / 2, scale)
}

/// Inverse transform back to a CHW image of shape (C, 2H, 2W).
pub fn idwt2d(packet: &WaveletPacket) -> Result<Vec<f32>> {
    if packet.channels() % 4 != 0 {
        return Err(Error::Shape(format!(
            "idwt2d: channel count {} not divisible by 4",
            packet.channels()
        )));
    }
    let mut coeffs;
    let data = if packet.scaled {
        coeffs = packet.data.clone();
        for v in &mut coeffs {
            *v *= 2.0;
        }
        &coeffs[..]
    } else {
        &packet.data[..]
    };
    let mut out = vec![0.0f32; packet.source_channels * 4 * packet.height * packet.width];
    idwt_chw(data, packet.channels(), packet.height, packet.width, &mut out);
    Ok(out)
}
