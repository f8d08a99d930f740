//! Synthetic preference records with known structure.

use std::collections::BTreeMap;

use ctxsteer::corpus::Setup;
use ctxsteer::extraction::PreferenceRecord;
use ctxsteer::linalg::Vector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const CONCEPTS: [&str; 6] = ["color", "material", "shape", "size", "place", "kind"];

pub fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn record(id: String, setup: Setup, concept: &str, pref: f64, acts: BTreeMap<usize, Vec<f64>>) -> PreferenceRecord {
    PreferenceRecord {
        sample_id: id,
        setup,
        concept: concept.to_string(),
        t_star: 0,
        pref,
        activations: acts.into_iter().map(|(l, v)| (l, Vector::new(v).unwrap())).collect(),
    }
}

/// Records over `layers` with `pref = uᵀh + noise·η`; layer `l` sees
/// `h + jitter·ξ_l`. Returns the records and the unit direction `u`.
pub fn planted(
    seed: u64,
    n: usize,
    d: usize,
    noise: f64,
    jitter: f64,
    layers: &[usize],
) -> (Vec<PreferenceRecord>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = {
        let g = gaussian(&mut rng, d);
        let norm = dot(&g, &g).sqrt();
        g.into_iter().map(|x| x / norm).collect::<Vec<_>>()
    };
    let recs = (0..n)
        .map(|i| {
            let h = gaussian(&mut rng, d);
            let pref = dot(&u, &h) + noise * rng.sample::<f64, _>(StandardNormal);
            let acts = layers
                .iter()
                .map(|&l| {
                    let xi = gaussian(&mut rng, d);
                    (l, h.iter().zip(xi).map(|(x, e)| x + jitter * e).collect())
                })
                .collect();
            record(format!("cf-{i:03}"), Setup::Counterfactual, CONCEPTS[i % 6], pref, acts)
        })
        .collect();
    (recs, u)
}

/// Mirrored halves sharing a constant offset `c`: the first half has
/// `h = g + c` with `pref = uᵀg + 1`, the mirrored half `h = −g + c` with
/// the opposite preference.
pub fn mirrored(
    seed: u64,
    per_half: usize,
    d: usize,
    one_sided: bool,
) -> (Vec<PreferenceRecord>, Vec<PreferenceRecord>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = gaussian(&mut rng, d);
    let c_norm2 = dot(&c, &c);
    // preference direction orthogonal to the offset
    let mut u = gaussian(&mut rng, d);
    let k = dot(&u, &c) / c_norm2;
    u.iter_mut().zip(&c).for_each(|(x, ci)| *x -= k * ci);
    let norm = dot(&u, &u).sqrt();
    u.iter_mut().for_each(|x| *x /= norm);
    let (mut with_c, mut without_c) = (Vec::new(), Vec::new());
    for i in 0..per_half {
        let mut g = gaussian(&mut rng, d);
        let k = dot(&g, &c) / c_norm2;
        g.iter_mut().zip(&c).for_each(|(x, ci)| *x -= k * ci);
        let p = dot(&u, &g) + 1.0;
        let concept = CONCEPTS[i % 5];
        for (setup, sign, prefix) in [(Setup::SymmetricA, 1.0, "sa"), (Setup::SymmetricB, -1.0, "sb")] {
            let h: Vec<f64> = g.iter().map(|x| sign * x).collect();
            let offset = if one_sided && setup == Setup::SymmetricB {
                0.0
            } else {
                1.0
            };
            let shifted: Vec<f64> = h.iter().zip(&c).map(|(x, ci)| x + offset * ci).collect();
            let id = format!("{prefix}-{i:03}");
            with_c.push(record(id.clone(), setup, concept, sign * p, [(0, shifted)].into()));
            without_c.push(record(id, setup, concept, sign * p, [(0, h)].into()));
        }
    }
    (with_c, without_c, c)
}
