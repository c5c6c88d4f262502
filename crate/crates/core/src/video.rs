//! Dense video volumes.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum VideoError {
    #[error("video extents must be positive, got {0:?}")]
    EmptyExtent([usize; 4]),
    #[error("data length {len} does not match extents {dims:?}")]
    DataLength { dims: [usize; 4], len: usize },
    #[error("video shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
}

/// Frames x height x width x channels, row-major, values nominally in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, VideoError> {
        let dims = [frames, height, width, channels];
        if dims.contains(&0) {
            return Err(VideoError::EmptyExtent(dims));
        }
        if data.len() != frames * height * width * channels {
            return Err(VideoError::DataLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(frames: usize, height: usize, width: usize, channels: usize, value: f32) -> Self {
        let n = frames * height * width * channels;
        Self::new(frames, height, width, channels, vec![value; n]).expect("positive extents")
    }

    pub fn zeros(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self::filled(frames, height, width, channels, 0.0)
    }

    /// Builds a video by evaluating `f(frame, y, x, channel)` everywhere.
    pub fn from_fn(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(frames * height * width * channels);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for c in 0..channels {
                        data.push(f(t, y, x, c));
                    }
                }
            }
        }
        Self::new(frames, height, width, channels, data).expect("positive extents")
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.frames
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `[frames, height, width, channels]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }

    pub fn pixel_count(&self) -> usize {
        self.frames * self.height * self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels
    }

    #[inline]
    pub fn pixel(&self, t: usize, y: usize, x: usize) -> &[f32] {
        let i = self.index(t, y, x);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, t: usize, y: usize, x: usize) -> &mut [f32] {
        let i = self.index(t, y, x);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * self.channels;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<(), VideoError> {
        if self.dims() != other.dims() {
            return Err(VideoError::ShapeMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// Mean over all pixels of the Rec. 601 luma (first three channels);
    /// single-channel videos return their plain mean.
    pub fn mean_luminance(&self, t: usize) -> f64 {
        let frame = self.frame(t);
        let px = self.height * self.width;
        if self.channels < 3 {
            return frame.iter().step_by(self.channels).map(|&v| v as f64).sum::<f64>() / px as f64;
        }
        frame
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .sum::<f64>()
            / px as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_extents() {
        assert!(matches!(
            VideoTensor::new(1, 2, 2, 3, vec![0.0; 11]),
            Err(VideoError::DataLength { .. })
        ));
        assert!(matches!(
            VideoTensor::new(0, 2, 2, 3, vec![]),
            Err(VideoError::EmptyExtent(_))
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let v = VideoTensor::from_fn(2, 3, 4, 2, |t, y, x, c| (t * 1000 + y * 100 + x * 10 + c) as f32);
        assert_eq!(v.pixel(1, 2, 3), &[1230.0, 1231.0]);
        assert_eq!(v.frame(1)[0], 1000.0);
    }
}
