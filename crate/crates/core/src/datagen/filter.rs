use crate::datagen::dataset::DatasetManifest;
use crate::image::ImageTensor;
use crate::Result;

/// Joint image/text embedding space used to score generated images against
/// quality prompts.
pub trait Embedder {
    fn embed_image(&self, img: &ImageTensor) -> Vec<f64>;
    fn embed_text(&self, prompt: &str) -> Vec<f64>;
}

pub const DEFAULT_PROMPTS: [&str; 3] = ["photo-realistic", "good lighting", "illumination"];

/// Deterministic stand-in: an image embeds to the 1-D vector
/// `[mean luminance − ½]`, every prompt to `[0.8]`. Cosine similarity is then
/// +1 for bright images and −1 for dark ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct BrightnessEmbedder;

impl Embedder for BrightnessEmbedder {
    fn embed_image(&self, img: &ImageTensor) -> Vec<f64> {
        vec![img.mean_luminance() - 0.5]
    }

    fn embed_text(&self, _prompt: &str) -> Vec<f64> {
        vec![0.8]
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices (ascending) of images whose best prompt similarity reaches
/// `threshold`.
pub fn filter_indices(images: &[ImageTensor], embedder: &dyn Embedder, prompts: &[&str], threshold: f64) -> Vec<usize> {
    let prompt_vecs: Vec<Vec<f64>> = prompts.iter().map(|p| embedder.embed_text(p)).collect();
    images
        .iter()
        .enumerate()
        .filter(|(_, img)| {
            let e = embedder.embed_image(img);
            let best = prompt_vecs
                .iter()
                .map(|p| cosine(&e, p))
                .fold(f64::NEG_INFINITY, f64::max);
            best >= threshold
        })
        .map(|(i, _)| i)
        .collect()
}

/// The records of `manifest` that pass [`filter_indices`], in input order.
pub fn filter_by_similarity(
    manifest: &DatasetManifest,
    embedder: &dyn Embedder,
    prompts: &[&str],
    threshold: f64,
) -> Result<DatasetManifest> {
    let images = manifest
        .records
        .iter()
        .map(|r| manifest.load_image(r))
        .collect::<Result<Vec<_>>>()?;
    let keep = filter_indices(&images, embedder, prompts, threshold);
    Ok(DatasetManifest::new(
        manifest.root.clone(),
        keep.into_iter().map(|i| manifest.records[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Vec<ImageTensor> {
        [0.1f32, 0.9, 0.3, 0.7, 0.2, 0.8]
            .iter()
            .map(|&v| ImageTensor::constant(2, 2, 3, v).unwrap())
            .collect()
    }

    #[test]
    fn infinite_thresholds() {
        let imgs = ramp();
        let e = BrightnessEmbedder;
        assert_eq!(filter_indices(&imgs, &e, &DEFAULT_PROMPTS, f64::NEG_INFINITY).len(), imgs.len());
        assert!(filter_indices(&imgs, &e, &DEFAULT_PROMPTS, f64::INFINITY).is_empty());
    }

    #[test]
    fn stub_embedder_keeps_the_bright_half() {
        let keep = filter_indices(&ramp(), &BrightnessEmbedder, &DEFAULT_PROMPTS, 0.5);
        assert_eq!(keep, vec![1, 3, 5]);
    }
}
