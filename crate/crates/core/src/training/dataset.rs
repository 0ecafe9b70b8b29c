use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fabsim::{FabParams, fabricate};
use crate::neural::Tensor4;
use crate::par;
use crate::raster::{Bitmap, PatchGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Which side of a pair is the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Layout in, fabricated structure as label.
    Forward,
    /// Fabricated structure in, layout as label.
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    pub patch_size: usize,
    pub stride: usize,
    pub split_seed: u64,
    /// Independent noise realizations of the fabrication per pattern.
    pub fab_runs: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            patch_size: 128,
            stride: 32,
            split_seed: 0,
            fab_runs: 1,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct PairRef {
    /// Index into `fabricated` (which records its layout).
    source: usize,
    x: usize,
    y: usize,
}

/// Positionally aligned layout/fabricated windows with a seeded 80:20
/// train/test assignment. Windows are cropped on demand from the stored
/// full rasters.
#[derive(Clone, Debug)]
pub struct Dataset {
    patch_size: usize,
    stride: usize,
    layouts: Vec<Bitmap>,
    fabricated: Vec<(usize, Bitmap)>,
    pairs: Vec<PairRef>,
    split: Vec<Split>,
    train: Vec<usize>,
    test: Vec<usize>,
}

/// Fabricates each pattern and co-slices both rasters at `stride`.
pub fn build_dataset(corpus: &[Bitmap], fab: &FabParams, stride: usize) -> Result<Dataset> {
    build_dataset_with(
        corpus,
        fab,
        &DatasetOptions {
            stride,
            split_seed: fab.seed,
            ..DatasetOptions::default()
        },
    )
}

pub fn build_dataset_with(
    corpus: &[Bitmap],
    fab: &FabParams,
    options: &DatasetOptions,
) -> Result<Dataset> {
    if corpus.is_empty() {
        return Err(Error::Parameter("corpus is empty".into()));
    }
    if options.fab_runs == 0 {
        return Err(Error::Parameter("fab_runs must be >= 1".into()));
    }
    fab.validate()?;
    let jobs: Vec<(usize, FabParams)> = (0..options.fab_runs)
        .flat_map(|run| {
            let params = fab.with_seed(fab.seed.wrapping_add(run as u64));
            (0..corpus.len()).map(move |p| (p, params))
        })
        .collect();
    let fabricated = par::map_indexed(jobs.len(), |i| {
        let (p, params) = jobs[i];
        fabricate(&corpus[p], &params).map(|b| (p, b))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Dataset::from_parts(corpus.to_vec(), fabricated, options)
}

impl Dataset {
    /// Pairs every fabricated raster with the layout it came from.
    pub fn from_parts(
        layouts: Vec<Bitmap>,
        fabricated: Vec<(usize, Bitmap)>,
        options: &DatasetOptions,
    ) -> Result<Self> {
        let size = options.patch_size;
        let mut pairs = Vec::new();
        for (source, (layout_idx, fab)) in fabricated.iter().enumerate() {
            let layout = layouts.get(*layout_idx).ok_or_else(|| {
                Error::Parameter(format!(
                    "fabricated raster {source} references missing layout {layout_idx}"
                ))
            })?;
            if (layout.width(), layout.height()) != (fab.width(), fab.height()) {
                return Err(Error::Shape(format!(
                    "layout {layout_idx} is {}x{} but its fabricated raster is {}x{}",
                    layout.width(),
                    layout.height(),
                    fab.width(),
                    fab.height()
                )));
            }
            if layout.width() < size || layout.height() < size {
                return Err(Error::Size(format!(
                    "pattern {layout_idx} is {}x{}, smaller than the {size}px window",
                    layout.width(),
                    layout.height()
                )));
            }
            let grid = PatchGrid::new(layout.width(), layout.height(), size, options.stride)?;
            pairs.extend(grid.offsets().map(|(x, y)| PairRef { source, x, y }));
        }

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.split_seed));
        let n_test = pairs.len() / 5;
        let mut split = vec![Split::Train; pairs.len()];
        for &i in &order[..n_test] {
            split[i] = Split::Test;
        }
        let train = (0..pairs.len())
            .filter(|&i| split[i] == Split::Train)
            .collect();
        let test = (0..pairs.len())
            .filter(|&i| split[i] == Split::Test)
            .collect();
        Ok(Self {
            patch_size: size,
            stride: options.stride,
            layouts,
            fabricated,
            pairs,
            split,
            train,
            test,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn layouts(&self) -> &[Bitmap] {
        &self.layouts
    }

    /// Fabricated rasters with the index of their layout.
    pub fn fabricated(&self) -> &[(usize, Bitmap)] {
        &self.fabricated
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    /// Source raster index and window offset of pair `i`.
    pub fn origin(&self, i: usize) -> (usize, usize, usize) {
        let p = self.pairs[i];
        (self.fabricated[p.source].0, p.x, p.y)
    }

    /// Index into [`Dataset::fabricated`] of the raster pair `i` was cut from.
    pub fn source(&self, i: usize) -> usize {
        self.pairs[i].source
    }

    /// Writes the layout and fabricated windows of pair `i`.
    pub fn fill_pair(&self, i: usize, layout: &mut [f32], fabricated: &mut [f32]) {
        let p = self.pairs[i];
        let (layout_idx, fab) = &self.fabricated[p.source];
        self.layouts[*layout_idx].crop_into(p.x, p.y, self.patch_size, layout);
        fab.crop_into(p.x, p.y, self.patch_size, fabricated);
    }

    pub fn pair(&self, i: usize) -> (Vec<f32>, Vec<f32>) {
        let n = self.patch_size * self.patch_size;
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        self.fill_pair(i, &mut a, &mut b);
        (a, b)
    }

    /// `(inputs, labels)` tensors for the given pairs.
    pub fn batch(
        &self,
        indices: &[usize],
        direction: Direction,
    ) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
        let s = self.patch_size;
        let n = s * s;
        let mut layouts = vec![0.0; indices.len() * n];
        let mut fabs = vec![0.0; indices.len() * n];
        par::for_each_chunk_pair_mut(&mut layouts, n, &mut fabs, n, |k, l, f| {
            self.fill_pair(indices[k], l, f)
        });
        let dims = [indices.len(), s, s, 1];
        let (layouts, fabs) = (
            Tensor4::from_vec(dims, layouts)?,
            Tensor4::from_vec(dims, fabs)?,
        );
        Ok(match direction {
            Direction::Forward => (layouts, fabs),
            Direction::Inverse => (fabs, layouts),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Rect;
    use crate::raster::rasterize;

    fn square(size: usize) -> Bitmap {
        let a = size as f64 / 4.0;
        rasterize(&[Rect::new(a, a, 3.0 * a, 3.0 * a)], size, size).unwrap()
    }

    #[test]
    fn one_window_pattern_is_one_pair() {
        let ds = build_dataset(&[square(128)], &FabParams::default(), 32).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.indices(Split::Train), &[0]);
        assert!(ds.indices(Split::Test).is_empty());
    }

    #[test]
    fn paper_scale_pair_count() {
        // (2048 - 128) / 32 + 1 = 61 columns, (1536 - 128) / 32 + 1 = 45 rows
        let g = PatchGrid::new(2048, 1536, 128, 32).unwrap();
        assert_eq!((g.cols, g.rows), (61, 45));
        assert_eq!(30 * g.len(), 82_350);
    }

    #[test]
    fn split_is_eighty_twenty_and_seeded() {
        // 10 columns x 10 rows of windows on a 128 + 9*8 = 200px canvas
        let corpus = [square(200)];
        let options = DatasetOptions {
            stride: 8,
            split_seed: 4,
            ..DatasetOptions::default()
        };
        let ds = build_dataset_with(&corpus, &FabParams::default(), &options).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.indices(Split::Train).len(), 80);
        assert_eq!(ds.indices(Split::Test).len(), 20);
        let again = build_dataset_with(&corpus, &FabParams::default(), &options).unwrap();
        assert_eq!(ds.indices(Split::Test), again.indices(Split::Test));
        let other = DatasetOptions {
            split_seed: 5,
            ..options
        };
        let reshuffled = build_dataset_with(&corpus, &FabParams::default(), &other).unwrap();
        assert_ne!(ds.indices(Split::Test), reshuffled.indices(Split::Test));
    }

    #[test]
    fn pairs_are_aligned_crops() {
        let layout = square(192);
        let fab = FabParams::default();
        let ds = build_dataset(std::slice::from_ref(&layout), &fab, 32).unwrap();
        let fabricated = fabricate(&layout, &fab).unwrap();
        for i in 0..ds.len() {
            let (src, x, y) = ds.origin(i);
            assert_eq!(src, 0);
            let (l, f) = ds.pair(i);
            let mut expect_l = vec![0.0; 128 * 128];
            let mut expect_f = vec![0.0; 128 * 128];
            layout.crop_into(x, y, 128, &mut expect_l);
            fabricated.crop_into(x, y, 128, &mut expect_f);
            assert_eq!(l, expect_l);
            assert_eq!(f, expect_f);
        }
        let (x, y) = ds.batch(&[0, 1], Direction::Inverse).unwrap();
        assert_eq!(x.sample(1), ds.pair(1).1.as_slice());
        assert_eq!(y.sample(1), ds.pair(1).0.as_slice());
    }

    #[test]
    fn small_patterns_rejected() {
        let err = build_dataset(&[square(100)], &FabParams::default(), 32).unwrap_err();
        assert!(matches!(err, Error::Size(_)));
        assert!(matches!(
            build_dataset(&[], &FabParams::default(), 32),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn multiple_fab_runs_multiply_pairs() {
        let fab = FabParams {
            edge_noise_amp: 0.05,
            ..FabParams::default()
        };
        let options = DatasetOptions {
            fab_runs: 3,
            ..DatasetOptions::default()
        };
        let ds = build_dataset_with(&[square(128), square(160)], &fab, &options).unwrap();
        assert_eq!(ds.fabricated().len(), 6);
        assert_eq!(ds.len(), 3 * (1 + 4));
    }
}
