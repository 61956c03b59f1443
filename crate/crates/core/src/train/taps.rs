//! Encoder taps memoized per (sample, flip).
//!
//! The encoder is frozen and evaluates each image independently, so its taps
//! can be computed once and shared by every run over the same dataset.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::data::{Dataset, Flip};
use crate::encoder::{Encoder, EncoderTapSet};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Scalar;

pub struct TapCache<T> {
    encoder_digest: u64,
    dataset_digest: u64,
    map: RwLock<HashMap<(usize, Flip), Arc<EncoderTapSet<T>>>>,
}

impl<T: Scalar> TapCache<T> {
    pub fn new(dataset: &Dataset, encoder: &Encoder<T>) -> Self {
        Self { encoder_digest: encoder.recorded_digest(), dataset_digest: dataset.digest(), map: RwLock::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("tap cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn serves(&self, model: &Model<T>, data: &Dataset) -> bool {
        model.encoder.is_frozen() && model.encoder.recorded_digest() == self.encoder_digest && data.digest() == self.dataset_digest
    }

    /// Taps of `indices` (with their flips) for `model`; `None` for variants
    /// without the encoder. Falls back to direct encoding when the model's
    /// encoder or the dataset differ from the ones the cache was built for.
    pub fn batch(
        &self,
        model: &Model<T>,
        data: &Dataset,
        indices: &[usize],
        flips: Option<&[Flip]>,
    ) -> Result<Option<EncoderTapSet<T>>> {
        if !model.spec.variant.uses_encoder() {
            return Ok(None);
        }
        if !self.serves(model, data) {
            return model.encode(&data.to_feature_map(indices, flips));
        }
        let keys: Vec<(usize, Flip)> =
            indices.iter().enumerate().map(|(k, &i)| (i, flips.map(|f| f[k]).unwrap_or(Flip::None))).collect();
        let mut missing: Vec<(usize, Flip)> = {
            let map = self.map.read().expect("tap cache lock");
            keys.iter().filter(|k| !map.contains_key(k)).copied().collect()
        };
        missing.sort_by_key(|&(i, f)| (i, f as u8));
        missing.dedup();
        if !missing.is_empty() {
            let idx: Vec<usize> = missing.iter().map(|k| k.0).collect();
            let fl: Vec<Flip> = missing.iter().map(|k| k.1).collect();
            let taps = model.encoder.encode_with_taps(&data.to_feature_map(&idx, Some(&fl)))?;
            let mut map = self.map.write().expect("tap cache lock");
            for (j, key) in missing.into_iter().enumerate() {
                map.entry(key).or_insert_with(|| Arc::new(taps.sample(j)));
            }
        }
        let map = self.map.read().expect("tap cache lock");
        let parts: Vec<Arc<EncoderTapSet<T>>> = keys.iter().map(|k| map[k].clone()).collect();
        drop(map);
        let refs: Vec<&EncoderTapSet<T>> = parts.iter().map(|p| p.as_ref()).collect();
        Ok(Some(EncoderTapSet::concat(&refs)?))
    }
}

/// Taps through the cache when one is given, else encoded directly.
pub fn batch_taps<T: Scalar>(
    cache: Option<&TapCache<T>>,
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
    flips: Option<&[Flip]>,
    images: &crate::tensor::FeatureMap<T>,
) -> Result<Option<EncoderTapSet<T>>> {
    match cache {
        Some(c) => c.batch(model, data, indices, flips),
        None => model.encode(images),
    }
}
