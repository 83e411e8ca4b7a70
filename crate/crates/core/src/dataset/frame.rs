/// 8-bit image with interleaved channels (`height x width x channels`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * channels, "frame buffer size");
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Copies the `size x size` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Frame {
        assert!(x0 + size <= self.width && y0 + size <= self.height, "crop out of bounds");
        let row = size * self.channels;
        let mut data = Vec::with_capacity(size * row);
        for y in y0..y0 + size {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + row]);
        }
        Frame::new(size, size, self.channels, data)
    }

    /// Mean and population standard deviation over all samples.
    pub fn mean_std(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}
