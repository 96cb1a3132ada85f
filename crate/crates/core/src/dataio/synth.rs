use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{DataError, Dataset, Split};
use crate::rng::{stream_rng, DATA};
use crate::specialty::LabelMapping;

/// Planted-hierarchy generator settings.
///
/// Templates and class perturbations are smooth: drawn on a grid `coarse`
/// times smaller than the image and upsampled by repetition. Pixel noise is
/// independent per pixel. Perturbation and noise standard deviations are
/// `perturbation / separation` and `noise / separation`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub classes: usize,
    pub superclusters: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub separation: f64,
    pub perturbation: f64,
    pub noise: f64,
    pub coarse: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            classes: 16,
            superclusters: 4,
            per_class: 100,
            test_per_class: 100,
            image_size: 12,
            channels: 1,
            separation: 10.0,
            perturbation: 2.0,
            noise: 2.0,
            coarse: 2,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn new(classes: usize, superclusters: usize, per_class: usize, image_size: usize, separation: f64, seed: u64) -> Self {
        Self {
            classes,
            superclusters,
            per_class,
            test_per_class: per_class,
            image_size,
            separation,
            seed,
            ..Self::default()
        }
    }
}

fn smooth_field<R: Rng>(rng: &mut R, channels: usize, size: usize, coarse: usize, scale: f64) -> Vec<f64> {
    let grid = size.div_ceil(coarse);
    let cells: Vec<f64> = (0..channels * grid * grid)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in 0..size {
            for x in 0..size {
                out.push(cells[(c * grid + y / coarse) * grid + x / coarse]);
            }
        }
    }
    out
}

/// Class prototypes and the planted class-to-supercluster mapping.
pub fn planted_prototypes(p: &SynthParams) -> Result<(Vec<Vec<f64>>, LabelMapping), DataError> {
    if p.superclusters == 0 || !p.classes.is_multiple_of(p.superclusters) {
        return Err(DataError::Invalid(format!(
            "{} superclusters do not divide {} classes",
            p.superclusters, p.classes
        )));
    }
    if !(p.separation.is_finite() && p.separation > 0.0) || p.image_size == 0 || p.channels == 0 || p.coarse == 0 {
        return Err(DataError::Invalid("separation, image size, channels and coarse must be positive".into()));
    }
    let mut rng = stream_rng(p.seed, DATA);
    let mut assignments: Vec<usize> = (0..p.classes).map(|c| c % p.superclusters).collect();
    assignments.shuffle(&mut rng);
    let mapping = LabelMapping::new(assignments, p.superclusters).expect("valid planted mapping");
    let templates: Vec<Vec<f64>> = (0..p.superclusters)
        .map(|_| smooth_field(&mut rng, p.channels, p.image_size, p.coarse, 1.0))
        .collect();
    let scale = p.perturbation / p.separation;
    let prototypes = (0..p.classes)
        .map(|c| {
            let delta = smooth_field(&mut rng, p.channels, p.image_size, p.coarse, scale);
            templates[mapping.specialty_of(c)].iter().zip(delta).map(|(t, d)| t + d).collect()
        })
        .collect();
    Ok((prototypes, mapping))
}

/// Generates train and test splits of a planted class hierarchy.
pub fn synth_hierarchy(p: &SynthParams) -> Result<(Dataset, Dataset), DataError> {
    let (prototypes, mapping) = planted_prototypes(p)?;
    let mut rng = stream_rng(p.seed.wrapping_add(1), DATA);
    let sigma = p.noise / p.separation;
    let shape = [p.channels, p.image_size, p.image_size];
    let mut make = |count: usize, split: Split| -> Result<Dataset, DataError> {
        let mut images = Vec::with_capacity(p.classes * count * prototypes[0].len());
        let mut labels = Vec::with_capacity(p.classes * count);
        for (class, proto) in prototypes.iter().enumerate() {
            for _ in 0..count {
                images.extend(proto.iter().map(|&v| (v + sigma * rng.sample::<f64, _>(StandardNormal)) as f32));
                labels.push(class);
            }
        }
        let mut ds = Dataset::new(shape, images, labels, p.classes, split)?;
        ds.planted_mapping = Some(mapping.clone());
        Ok(ds)
    };
    let train = make(p.per_class, Split::Train)?;
    let test = make(p.test_per_class, Split::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest(protos: &[Vec<f64>], x: &[f32]) -> usize {
        let d = |p: &Vec<f64>| p.iter().zip(x).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum::<f64>();
        (0..protos.len()).min_by(|&a, &b| d(&protos[a]).total_cmp(&d(&protos[b]))).unwrap()
    }

    #[test]
    fn nearest_prototype_oracle_separates_classes() {
        let p = SynthParams::new(16, 4, 100, 12, 10.0, 3);
        let (protos, _) = planted_prototypes(&p).unwrap();
        let (train, test) = synth_hierarchy(&p).unwrap();
        for ds in [&train, &test] {
            let correct = (0..ds.len()).filter(|&i| nearest(&protos, ds.image(i)) == ds.labels[i]).count();
            assert!(correct as f64 / ds.len() as f64 >= 0.99, "{correct}/{}", ds.len());
        }
    }

    #[test]
    fn planted_sizes_are_equal() {
        for seed in 0..5 {
            let (train, _) = synth_hierarchy(&SynthParams::new(12, 3, 2, 6, 5.0, seed)).unwrap();
            assert_eq!(train.planted_mapping.as_ref().unwrap().sizes(), vec![4; 3]);
            assert_eq!(train.class_counts(), vec![2; 12]);
        }
    }

    #[test]
    fn large_separation_collapses_superclusters() {
        let p = SynthParams::new(8, 2, 1, 8, 1e9, 1);
        let (protos, mapping) = planted_prototypes(&p).unwrap();
        let dist = |a: usize, b: usize| protos[a].iter().zip(&protos[b]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        for a in 0..8 {
            for b in 0..8 {
                if mapping.specialty_of(a) == mapping.specialty_of(b) {
                    assert!(dist(a, b) < 1e-6);
                } else {
                    assert!(dist(a, b) > 0.1);
                }
            }
        }
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(synth_hierarchy(&SynthParams::new(10, 4, 1, 4, 1.0, 0)).is_err());
        assert!(synth_hierarchy(&SynthParams::new(8, 4, 1, 4, 0.0, 0)).is_err());
    }

    #[test]
    fn generation_is_seeded() {
        let p = SynthParams::new(4, 2, 3, 4, 2.0, 9);
        assert_eq!(synth_hierarchy(&p).unwrap(), synth_hierarchy(&p).unwrap());
        assert_ne!(synth_hierarchy(&p).unwrap().0, synth_hierarchy(&SynthParams { seed: 10, ..p }).unwrap().0);
    }
}
