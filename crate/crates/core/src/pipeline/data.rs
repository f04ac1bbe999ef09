use crate::acquisition::{undersample, zero_filled, SamplingMask};
use crate::datagen::{Dataset, DatasetManifest, Split};
use crate::diffcore::Tensor;
use crate::error::{ensure_eq, Error, Result};
use crate::fourier::{fft2c, ComplexImage};

/// A record in the tensor layout used for training: every complex raster
/// is stored as `[real plane, imaginary plane]`.
#[derive(Clone, Debug)]
pub(crate) struct Sample {
    pub id: u32,
    pub x_tc: Vec<f32>,
    pub y_tc: Vec<f32>,
    pub x_u: Vec<f32>,
    pub y_u: Vec<f32>,
    pub ref_aligned_x: Vec<f32>,
    pub ref_aligned_y: Vec<f32>,
    pub ref_moved_x: Vec<f32>,
    pub ref_moved_y: Vec<f32>,
    pub truth: ComplexImage<f32>,
    pub brain_mask: Vec<bool>,
}

fn planes<R: crate::fourier::ComplexRaster<f32>>(r: &R) -> Vec<f32> {
    r.to_tensor().into_data()
}

/// Dataset with k-space, under-sampled data and zero-filled images
/// precomputed for one sampling mask.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub size: usize,
    pub mask: SamplingMask,
    pub manifest: DatasetManifest,
    pub(crate) samples: Vec<Sample>,
}

impl Prepared {
    pub fn new(dataset: &Dataset, mask: &SamplingMask) -> Result<Self> {
        let size = dataset.manifest.config.size;
        ensure_eq("mask height", size, mask.height)?;
        let samples = crate::par::map_range(dataset.records.len(), |i| {
            let rec = &dataset.records[i];
            let y_tc = fft2c(&rec.tgt);
            let y_u = undersample(&y_tc, mask)?;
            let x_u = zero_filled(&y_u);
            Ok(Sample {
                id: rec.record_id,
                x_tc: planes(&rec.tgt),
                y_tc: planes(&y_tc),
                x_u: planes(&x_u),
                y_u: planes(&y_u),
                ref_aligned_x: planes(&rec.ref_aligned),
                ref_aligned_y: planes(&fft2c(&rec.ref_aligned)),
                ref_moved_x: planes(&rec.ref_moved),
                ref_moved_y: planes(&fft2c(&rec.ref_moved)),
                truth: rec.tgt.clone(),
                brain_mask: rec.brain_mask.clone(),
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        for (i, s) in samples.iter().enumerate() {
            if s.id as usize != i {
                return Err(Error::Format(format!("record {i} carries id {}", s.id)));
            }
        }
        Ok(Self {
            size,
            mask: mask.clone(),
            manifest: dataset.manifest.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self, split: Split) -> &[u32] {
        self.manifest.ids(split)
    }

    pub(crate) fn sample(&self, id: u32) -> &Sample {
        &self.samples[id as usize]
    }

    /// `[B, 2, H, W]` tensor from per-record planes.
    pub(crate) fn stack(&self, planes: &[&[f32]]) -> Tensor<f32> {
        let hw2 = 2 * self.size * self.size;
        let mut data = Vec::with_capacity(planes.len() * hw2);
        for p in planes {
            debug_assert_eq!(p.len(), hw2);
            data.extend_from_slice(p);
        }
        Tensor::new(vec![planes.len(), 2, self.size, self.size], data).expect("plane sizes")
    }
}
