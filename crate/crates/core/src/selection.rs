//! Seed selection by lighting-code distance, and the post-enhancer seam.

use serde::{Deserialize, Serialize};

use crate::diffusion::{RelightPipeline, RelightRequest};
use crate::image::ImageTensor;
use crate::intrinsics::LightCode;
use crate::{Error, Result};

/// A final image-to-image pass applied after sampling.
pub trait PostEnhancer {
    fn enhance(&self, img: &ImageTensor) -> Result<ImageTensor>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityEnhancer;

impl PostEnhancer for IdentityEnhancer {
    fn enhance(&self, img: &ImageTensor) -> Result<ImageTensor> {
        Ok(img.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeDistance {
    #[default]
    L2,
    /// `1 − cos(a, b)`; zero vectors are at distance 1 from everything.
    Cosine,
}

impl std::str::FromStr for CodeDistance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(CodeDistance::L2),
            "cosine" => Ok(CodeDistance::Cosine),
            other => Err(Error::invalid(format!("unknown code distance {other:?} (l2|cosine)"))),
        }
    }
}

pub fn code_distance(a: &LightCode, b: &LightCode, metric: CodeDistance) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("code dims differ: {} vs {}", a.dim(), b.dim())));
    }
    Ok(match metric {
        CodeDistance::L2 => a.l2_distance(b),
        CodeDistance::Cosine => {
            let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
            for (&x, &y) in a.values.iter().zip(&b.values) {
                let (x, y) = (x as f64, y as f64);
                ab += x * y;
                aa += x * x;
                bb += y * y;
            }
            if aa == 0.0 || bb == 0.0 {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            } else {
                1.0 - ab / (aa.sqrt() * bb.sqrt())
            }
        }
    })
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub seed: u64,
    pub image: ImageTensor,
    pub code: LightCode,
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub target_code: LightCode,
}

#[derive(Debug, Clone)]
pub struct Ranked {
    pub seed: u64,
    pub image: ImageTensor,
    pub distance: f64,
}

/// The `k` candidates closest to the target code, ascending, ties broken by
/// the smaller seed.
pub fn rank_candidates(set: &CandidateSet, k: usize, metric: CodeDistance) -> Result<Vec<Ranked>> {
    if k == 0 || k > set.candidates.len() {
        return Err(Error::invalid(format!(
            "top-k must lie in 1..={}, got {k}",
            set.candidates.len()
        )));
    }
    let mut scored = set
        .candidates
        .iter()
        .map(|c| Ok((code_distance(&c.code, &set.target_code, metric)?, c)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.seed.cmp(&b.1.seed)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(distance, c)| Ranked {
            seed: c.seed,
            image: c.image.clone(),
            distance,
        })
        .collect())
}

/// Relights with seeds `0..n_seeds`, re-encodes every output and keeps the
/// `k` whose lighting code is closest to the target image's.
pub fn nn_select(
    pipeline: &RelightPipeline,
    req: &RelightRequest<'_>,
    n_seeds: usize,
    k: usize,
    metric: CodeDistance,
) -> Result<Vec<Ranked>> {
    if k == 0 || k > n_seeds {
        return Err(Error::invalid(format!("need 1 <= k <= n_seeds, got k={k}, n_seeds={n_seeds}")));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).collect();
    let mut candidates = Vec::with_capacity(n_seeds);
    for chunk in seeds.chunks(8) {
        let sources = vec![req.source.clone(); chunk.len()];
        let targets = vec![req.target.clone(); chunk.len()];
        let images = pipeline.relight_batch(&sources, &targets, chunk, req.steps)?;
        for (&seed, img) in chunk.iter().zip(images) {
            let img = match req.enhancer {
                Some(e) => e.enhance(&img)?,
                None => img,
            };
            let (_, code) = pipeline.intrinsics.encode(&img)?;
            candidates.push(Candidate { seed, image: img, code });
        }
    }
    let (_, target_code) = pipeline.intrinsics.encode(&req.target)?;
    rank_candidates(&CandidateSet { candidates, target_code }, k, metric)
}
