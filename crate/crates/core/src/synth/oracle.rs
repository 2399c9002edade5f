use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::Pointmap;
use crate::memory::PatchGrid;
use crate::pipeline::{PatchFeatures, Predictor, PredictorError};

/// Gaussian noise injected into a fraction of the oracle's pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Metres, per coordinate.
    pub sigma: f64,
    /// Fraction of pixels that receive noise.
    pub fraction: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn is_clean(&self) -> bool {
        self.sigma == 0.0 || self.fraction == 0.0
    }
}

/// Log-confidence of an untouched pixel; confidence is `1 + exp(g)`.
const CLEAN_LOG_CONFIDENCE: f64 = 2.0;

/// Confidence of an exact prediction.
pub fn clean_confidence() -> f64 {
    1.0 + CLEAN_LOG_CONFIDENCE.exp()
}
/// Key magnitude. Large enough that retrieval saturates on the matching patch.
const KEY_GAIN: f64 = 100.0;

/// Predictor that replays known pointmaps, optionally corrupted.
///
/// Keys and queries are one-hot codes of the patch position scaled by a
/// large gain, so retrieval picks the same patch from memory. Values hold
/// the patch's mean world point in their first three entries. Fused
/// features received in [`Predictor::decode`] are recorded but do not change
/// the output.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    frames: Vec<Pointmap>,
    grid: PatchGrid,
    corruption: CorruptionSpec,
    feature_dim: usize,
    fused: Vec<Option<DMatrix<f64>>>,
    fail_at: Option<usize>,
}

impl OraclePredictor {
    /// `frames` are the true world-frame pointmaps.
    pub fn new(frames: Vec<Pointmap>, patch_size: usize, corruption: CorruptionSpec) -> Self {
        let (w, h) = frames.first().map(|f| (f.width, f.height)).unwrap_or((0, 0));
        let grid = PatchGrid::new(w, h, patch_size.max(1));
        let feature_dim = grid.len().max(3);
        let n = frames.len();
        Self {
            frames,
            grid,
            corruption,
            feature_dim,
            fused: vec![None; n],
            fail_at: None,
        }
    }

    /// Makes `decode` fail for frame `index` (for failure-injection tests).
    pub fn fail_at(mut self, index: usize) -> Self {
        self.fail_at = Some(index);
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    /// Fused features delivered for frame `index`, if any.
    pub fn fused(&self, index: usize) -> Option<&DMatrix<f64>> {
        self.fused.get(index).and_then(|f| f.as_ref())
    }

    /// One-hot key of patch `p`.
    pub fn key(&self, p: usize) -> Vec<f64> {
        let mut k = vec![0.0; self.feature_dim];
        k[p] = KEY_GAIN;
        k
    }

    fn frame(&self, index: usize) -> Result<&Pointmap, PredictorError> {
        self.frames.get(index).ok_or(PredictorError::MissingFrame(index))
    }

    /// The stored pointmap. Corrupted pixels get noise and a confidence
    /// tied to the noise magnitude; the others keep their stored confidence.
    pub fn predict(&self, index: usize) -> Result<Pointmap, PredictorError> {
        let truth = self.frame(index)?;
        if self.corruption.is_clean() {
            return Ok(truth.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.corruption.seed);
        rng.set_stream(index as u64);
        let normal = Normal::new(0.0, self.corruption.sigma).map_err(|e| PredictorError::Failed(e.to_string()))?;
        let mut points = truth.points.clone();
        let mut confidence = truth.confidence.clone();
        for (p, c) in points.iter_mut().zip(confidence.iter_mut()) {
            if rng.random_bool(self.corruption.fraction.clamp(0.0, 1.0)) {
                let noise = Vector3::from_fn(|_, _| normal.sample(&mut rng));
                *p += noise;
                // Below the clean value, lower for larger noise.
                let g = CLEAN_LOG_CONFIDENCE - 1.0 - noise.norm() / self.corruption.sigma;
                *c = 1.0 + g.exp();
            }
        }
        Pointmap::new(truth.width, truth.height, points, confidence).map_err(|e| PredictorError::Failed(e.to_string()))
    }
}

impl Predictor for OraclePredictor {
    fn encode(&mut self, index: usize) -> Result<PatchFeatures, PredictorError> {
        let truth = self.frame(index)?;
        let n = self.grid.len();
        let c = self.feature_dim;
        let mut keys = DMatrix::zeros(n, c);
        let mut values = DMatrix::zeros(n, c);
        for p in 0..n {
            keys[(p, p)] = KEY_GAIN;
            let mut mean = Vector3::zeros();
            let mut count = 0.0;
            for (u, v) in self.grid.pixels(p) {
                mean += truth.point(u, v);
                count += 1.0;
            }
            mean /= count;
            for d in 0..3 {
                values[(p, d)] = mean[d];
            }
        }
        Ok(PatchFeatures {
            queries: keys.clone(),
            keys,
            values,
        })
    }

    fn decode(&mut self, index: usize, fused: Option<&DMatrix<f64>>) -> Result<Pointmap, PredictorError> {
        if self.fail_at == Some(index) {
            return Err(PredictorError::Failed(format!("injected failure at frame {index}")));
        }
        let out = self.predict(index)?;
        if let Some(slot) = self.fused.get_mut(index) {
            *slot = fused.cloned();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{DualMemoryBank, MemoryConfig, MemoryToken};
    use crate::synth::{generate, SceneSpec};

    fn frames() -> Vec<Pointmap> {
        generate(&SceneSpec::rigid(1, 64, 48, 2))
            .unwrap()
            .into_iter()
            .map(|f| f.pointmap)
            .collect()
    }

    #[test]
    fn clean_oracle_is_exact_with_equal_confidence() {
        let truth = frames();
        let o = OraclePredictor::new(truth.clone(), 16, CorruptionSpec::default());
        let p = o.predict(1).unwrap();
        assert_eq!(p.points, truth[1].points);
        assert!(p.confidence.iter().all(|&c| c == p.confidence[0]));
    }

    #[test]
    fn corrupted_pixels_have_lower_confidence() {
        let truth = frames();
        let spec = CorruptionSpec {
            sigma: 0.01,
            fraction: 0.2,
            seed: 5,
        };
        let p = OraclePredictor::new(truth.clone(), 16, spec).predict(0).unwrap();
        let clean = clean_confidence();
        let mut corrupted = 0;
        for i in 0..p.len() {
            if p.points[i] != truth[0].points[i] {
                corrupted += 1;
                assert!(p.confidence[i] < clean);
            } else {
                assert_eq!(p.confidence[i], clean);
            }
        }
        let frac = corrupted as f64 / p.len() as f64;
        assert!((frac - 0.2).abs() < 0.05, "{frac}");
    }

    #[test]
    fn retrieval_returns_the_matching_patch_value() {
        let truth = frames();
        let mut o = OraclePredictor::new(truth, 16, CorruptionSpec::default());
        let feats = o.encode(0).unwrap();
        let c = o.feature_dim();
        let mut bank = DualMemoryBank::new(MemoryConfig::new(c, c)).unwrap();
        let tokens = (0..feats.keys.nrows())
            .map(|p| MemoryToken {
                key: feats.keys.row(p).iter().copied().collect(),
                value: feats.values.row(p).iter().copied().collect(),
                frame_id: 0,
                patch_index: p as u32,
                confidence: 2.0,
                uncertainty: None,
            })
            .collect();
        bank.insert_frame(0, tokens).unwrap();
        let out = bank.retrieve(&feats.queries).unwrap();
        let expect = &feats.values + &feats.queries;
        assert!((out - expect).amax() < 1e-6);
    }

    #[test]
    fn injected_failure() {
        let mut o = OraclePredictor::new(frames(), 16, CorruptionSpec::default()).fail_at(1);
        assert!(o.decode(0, None).is_ok());
        assert!(o.decode(1, None).is_err());
        assert!(matches!(o.decode(7, None), Err(PredictorError::MissingFrame(7))));
    }
}
