//! Frozen teacher networks for the distillation task. A seeded
//! random-weight conv stack stands in for a pretrained classifier: the
//! student mimics a fixed function on normal data, and teacher-student
//! disagreement on unfamiliar objects is the anomaly signal, so the teacher
//! only needs to be frozen and input-sensitive, not accurate.

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor};
use crate::rng::derive_rng;

pub const DEFAULT_N_CLS: usize = 32;
pub const DEFAULT_N_DET: usize = 8;

pub struct TeacherBundle {
    pub n_cls: usize,
    pub n_det: usize,
    pub seed: u64,
    store: ParamStore<f32>,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    fc: (ParamId, ParamId),
}

const C1: usize = 8;
const C2: usize = 16;
const SIDE: usize = 64;

impl TeacherBundle {
    pub fn new(n_cls: usize, n_det: usize, seed: u64) -> Result<Self> {
        if n_cls == 0 || n_det == 0 {
            return Err(Error::arg("teacher dimensions must be positive"));
        }
        let mut store = ParamStore::new();
        let mut layer = 0u64;
        let mut init = |shape: &[usize], fan_in: usize| {
            let mut rng = derive_rng(seed, "teacher-init", &[layer]);
            layer += 1;
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::<f64>::rand_uniform(shape, -bound, bound, &mut rng).cast::<f32>()
        };
        let conv1 = (init(&[3, 3, 3, C1], 27), init(&[C1], C1));
        let conv2 = (init(&[3, 3, C1, C2], 9 * C1), init(&[C2], C2));
        let flat = (SIDE / 4) * (SIDE / 4) * C2;
        let fc = (init(&[flat, n_cls], flat), init(&[n_cls], n_cls));
        let conv1 = (store.add(conv1.0), store.add(conv1.1));
        let conv2 = (store.add(conv2.0), store.add(conv2.1));
        let fc = (store.add(fc.0), store.add(fc.1));
        Ok(TeacherBundle {
            n_cls,
            n_det,
            seed,
            store,
            conv1,
            conv2,
            fc,
        })
    }

    /// Features for a batch of images [B, 64, 64, 3] → [B, n_cls].
    pub fn classifier_features_batch(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != SIDE || shape[2] != SIDE || shape[3] != 3 {
            return Err(Error::shape(format!(
                "teacher expects [B, {SIDE}, {SIDE}, 3] images, got {shape:?}"
            )));
        }
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let k1 = g.param(&self.store, self.conv1.0);
        let b1 = g.param(&self.store, self.conv1.1);
        let y = g.conv2d(x, k1, b1)?;
        let y = g.relu(y);
        let y = g.maxpool2d(y)?;
        let k2 = g.param(&self.store, self.conv2.0);
        let b2 = g.param(&self.store, self.conv2.1);
        let y = g.conv2d(y, k2, b2)?;
        let y = g.relu(y);
        let y = g.maxpool2d(y)?;
        let flat = (SIDE / 4) * (SIDE / 4) * C2;
        let y = g.reshape(y, &[shape[0], flat])?;
        let w = g.param(&self.store, self.fc.0);
        let b = g.param(&self.store, self.fc.1);
        let y = g.fully_connected(y, w, b)?;
        Ok(g.value(y).clone())
    }

    /// Features for a single [64, 64, 3] image.
    pub fn classifier_features(&self, image: &Tensor<f32>) -> Result<Vec<f32>> {
        if image.shape() != [SIDE, SIDE, 3] {
            return Err(Error::shape(format!(
                "teacher expects a [{SIDE}, {SIDE}, 3] image, got {:?}",
                image.shape()
            )));
        }
        let batch = image.clone().reshaped(&[1, SIDE, SIDE, 3])?;
        Ok(self.classifier_features_batch(&batch)?.into_data())
    }

    /// Distillation target: classifier features first, detector class
    /// probabilities second.
    pub fn concat_targets(&self, features: &[f32], det_probs: &[f64]) -> Result<Vec<f32>> {
        if features.len() != self.n_cls {
            return Err(Error::shape(format!(
                "classifier features length {} != n_cls {}",
                features.len(),
                self.n_cls
            )));
        }
        if det_probs.len() != self.n_det {
            return Err(Error::shape(format!(
                "detector probabilities length {} != n_det {}",
                det_probs.len(),
                self.n_det
            )));
        }
        let mut out = Vec::with_capacity(self.n_cls + self.n_det);
        out.extend_from_slice(features);
        out.extend(det_probs.iter().map(|&p| p as f32));
        Ok(out)
    }

    pub fn target_len(&self) -> usize {
        self.n_cls + self.n_det
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = derive_rng(seed, "img", &[]);
        Tensor::<f64>::rand_uniform(&[64, 64, 3], 0.0, 1.0, &mut rng).cast()
    }

    #[test]
    fn deterministic_and_correct_length() {
        let t = TeacherBundle::new(32, 8, 3).unwrap();
        let img = image(0);
        let a = t.classifier_features(&img).unwrap();
        let b = t.classifier_features(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        assert!(a.iter().all(|v| v.is_finite()));

        let t2 = TeacherBundle::new(32, 8, 3).unwrap();
        assert_eq!(t2.classifier_features(&img).unwrap(), a);
    }

    #[test]
    fn distinct_images_give_distinct_features() {
        let t = TeacherBundle::new(32, 8, 3).unwrap();
        let a = t.classifier_features(&image(1)).unwrap();
        let b = t.classifier_features(&image(2)).unwrap();
        let dot: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(dot / (na * nb) < 0.99);
    }

    #[test]
    fn wrong_image_size_rejected() {
        let t = TeacherBundle::new(32, 8, 3).unwrap();
        let img = Tensor::<f32>::zeros(&[32, 32, 3]);
        assert!(t.classifier_features(&img).is_err());
    }

    #[test]
    fn concat_order_and_validation() {
        let t = TeacherBundle::new(4, 3, 0).unwrap();
        let features = vec![1.0, 2.0, 3.0, 4.0];
        let probs = vec![0.5, 0.25, 0.25];
        let target = t.concat_targets(&features, &probs).unwrap();
        assert_eq!(target.len(), 7);
        assert_eq!(&target[..4], features.as_slice());
        assert_eq!(&target[4..], &[0.5, 0.25, 0.25]);
        assert!(t.concat_targets(&features[..3], &probs).is_err());
        assert!(t.concat_targets(&features, &probs[..2]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let t = TeacherBundle::new(16, 8, 7).unwrap();
        let a = image(5);
        let b = image(6);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let batch = Tensor::from_vec(&[2, 64, 64, 3], data).unwrap();
        let out = t.classifier_features_batch(&batch).unwrap();
        assert_eq!(&out.data()[..16], t.classifier_features(&a).unwrap().as_slice());
        assert_eq!(&out.data()[16..], t.classifier_features(&b).unwrap().as_slice());
    }
}
