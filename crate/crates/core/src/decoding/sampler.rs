use rand::Rng;

use super::{is_masked, DecodeError, MASK_FLOOR};
use crate::tokenizer::TokenId;

/// Temperatures below this collapse to greedy argmax.
pub const GREEDY_TEMPERATURE: f32 = 1e-6;

/// The nucleus: the smallest set of most probable tokens whose mass reaches
/// `top_p`, with probabilities renormalized over the set and listed in id
/// order. The top token is always kept. Among equal probabilities the lower id
/// ranks first.
pub fn nucleus(logits: &[f32], temperature: f32, top_p: f32) -> Result<Vec<(TokenId, f64)>, DecodeError> {
    let n = Nucleus::new(logits, temperature, top_p)?;
    Ok(n
        .live_weights()
        .filter(|&(id, w)| n.keeps(id, w))
        .map(|(id, w)| (id, w as f64 / n.mass))
        .collect())
}

const LANES: usize = 8;

/// Unnormalized candidate weights in blocks of eight consecutive ids. Only
/// blocks holding an unmasked logit are stored; masked lanes weigh 0 and have
/// their `live` bit clear.
struct Nucleus {
    starts: Vec<TokenId>,
    live: Vec<u8>,
    weights: Vec<[f32; LANES]>,
    /// Lowest ranked member of the nucleus; `None` keeps every candidate.
    cutoff: Option<(TokenId, f32)>,
    mass: f64,
}

impl Nucleus {
    fn new(logits: &[f32], temperature: f32, top_p: f32) -> Result<Self, DecodeError> {
        let (chunks, rest) = logits.as_chunks::<LANES>();
        let mut tail = [f32::MIN; LANES];
        tail[..rest.len()].copy_from_slice(rest);
        let blocks = || chunks.iter().chain(std::iter::once(&tail));

        let mut lanes = [f32::MIN; LANES];
        for c in blocks() {
            for (m, &l) in lanes.iter_mut().zip(c) {
                *m = if l > *m { l } else { *m };
            }
        }
        let max = lanes.iter().fold(f32::MIN, |m, &l| if l > m { l } else { m });
        if is_masked(max) {
            return Err(DecodeError::EmptySupport);
        }
        let inv_t = 1.0 / temperature;
        let mut n = Nucleus {
            starts: Vec::new(),
            live: Vec::new(),
            weights: Vec::new(),
            cutoff: None,
            mass: 0.0,
        };
        for (k, c) in blocks().enumerate() {
            let live = lane_mask(c, |l| l > MASK_FLOOR);
            if live == 0 {
                continue;
            }
            let mut x = [0.0f32; LANES];
            for (x, &l) in x.iter_mut().zip(c) {
                *x = if l > MASK_FLOOR { (l - max) * inv_t } else { f32::NEG_INFINITY };
            }
            n.starts.push((k * LANES) as TokenId);
            n.live.push(live);
            n.weights.push(x);
        }
        exp_nonpositive(n.weights.as_flattened_mut());
        n.mass = lane_sum(n.weights.as_flattened());
        n.cut(top_p as f64 * n.mass);
        Ok(n)
    }

    fn blocks(&self) -> impl Iterator<Item = (TokenId, u8, &[f32; LANES])> {
        self.starts
            .iter()
            .zip(&self.live)
            .zip(&self.weights)
            .map(|((&s, &live), w)| (s, live, w))
    }

    /// Live candidates in id order.
    fn live_weights(&self) -> impl Iterator<Item = (TokenId, f32)> + '_ {
        self.blocks().flat_map(|(s, live, w)| {
            (0..LANES)
                .filter(move |&j| live >> j & 1 == 1)
                .map(move |j| (s + j as TokenId, w[j]))
        })
    }

    fn keeps(&self, id: TokenId, w: f32) -> bool {
        match self.cutoff {
            None => true,
            Some((cid, cw)) => w > cw || (w == cw && id <= cid),
        }
    }

    /// Lanes of a block that are in the nucleus with positive weight.
    fn kept_lanes(&self, start: TokenId, live: u8, w: &[f32; LANES]) -> u8 {
        let kept = match self.cutoff {
            None => lane_mask(w, |w| w > 0.0),
            Some((cid, cw)) => {
                let mut m = 0u8;
                for (j, &w) in w.iter().enumerate() {
                    let k = w > cw || (w == cw && start + j as TokenId <= cid);
                    m |= ((k && w > 0.0) as u8) << j;
                }
                m
            }
        };
        kept & live
    }

    /// Radix select on the weight bits: bucket candidates by the leading
    /// digit of their rank key, find the bucket where the running mass crosses
    /// `target`, and recurse into it. After the last digit the survivors share
    /// one weight and are already in id order.
    fn cut(&mut self, target: f64) {
        let mut acc = 0.0;
        let mut pool: Vec<(TokenId, f32)> = Vec::new();
        for (level, shift) in [20u32, 10, 0].into_iter().enumerate() {
            let digit = |w: f32| ((rank_key(w) >> shift) & 0x3ff) as usize;
            let mut mass = vec![0.0f64; 1024];
            if level == 0 {
                // masked lanes add 0 to the bucket of weight 0
                for &w in self.weights.as_flattened() {
                    mass[digit(w)] += w as f64;
                }
            } else {
                for &(_, w) in &pool {
                    mass[digit(w)] += w as f64;
                }
            }
            let mut edge = None;
            for (b, &m) in mass.iter().enumerate() {
                if m > 0.0 && acc + m >= target {
                    edge = Some(b);
                    break;
                }
                acc += m;
            }
            let edge = match (edge, level) {
                (Some(e), _) => e,
                // Rounding can leave the full sum just short of `target`: keep everything.
                (None, 0) => return,
                // Same shortfall inside a bucket: settle on its lightest digit.
                (None, _) => {
                    let e = pool.iter().map(|&(_, w)| digit(w)).max().unwrap_or(0);
                    acc -= mass[e];
                    e
                }
            };
            if level == 0 {
                for (s, live, w) in self.blocks() {
                    let hit = lane_mask(w, |w| digit(w) == edge) & live;
                    for j in (0..LANES).filter(|&j| hit >> j & 1 == 1) {
                        pool.push((s + j as TokenId, w[j]));
                    }
                }
            } else {
                pool.retain(|&(_, w)| digit(w) == edge);
            }
        }
        let mut cutoff = pool[pool.len() - 1];
        for &c in &pool {
            acc += c.1 as f64;
            if acc >= target {
                cutoff = c;
                break;
            }
        }
        self.cutoff = Some(cutoff);
        self.mass = acc;
    }
}

fn lane_mask(xs: &[f32; LANES], f: impl Fn(f32) -> bool) -> u8 {
    let mut m = 0u8;
    for (j, &x) in xs.iter().enumerate() {
        m |= (f(x) as u8) << j;
    }
    m
}

/// `exp` for inputs <= 0, written so it vectorizes. Within 2 ulp of `f32::exp`,
/// exact at 0, and flushes to 0 below -87.
fn exp_nonpositive(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to an integer held in the low mantissa bits
    const ROUND: f32 = 12_582_912.0;
    for x in xs {
        let v = *x;
        let shifted = v * LOG2E + ROUND;
        let k = shifted - ROUND;
        let r = v - k * LN2_HI - k * LN2_LO;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 0.166_666_65;
        p = p * r + 0.5;
        let y = p * r * r + r + 1.0;
        let e = (shifted.to_bits() as i32).wrapping_sub(ROUND.to_bits() as i32);
        let scale = f32::from_bits(((e + 127).max(0) as u32) << 23);
        *x = if v < -87.0 { 0.0 } else { y * scale };
    }
}

fn lane_sum(xs: &[f32]) -> f64 {
    let (chunks, rest) = xs.as_chunks::<LANES>();
    let mut acc = [0.0f64; LANES];
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x as f64;
        }
    }
    acc.iter().sum::<f64>() + rest.iter().map(|&x| x as f64).sum::<f64>()
}

/// Weights lie in [0, 1], where the float bit pattern is monotone: heavier
/// weights get smaller keys. Keys fit in 30 bits.
fn rank_key(w: f32) -> u32 {
    const ONE: u32 = 0x3f80_0000;
    ONE.saturating_sub(w.to_bits())
}

/// Temperature plus nucleus sampling. Masked logits are never drawn.
pub fn sample<R: Rng + ?Sized>(
    logits: &[f32],
    temperature: f32,
    top_p: f32,
    rng: &mut R,
) -> Result<TokenId, DecodeError> {
    if temperature < GREEDY_TEMPERATURE {
        return argmax(logits);
    }
    let n = Nucleus::new(logits, temperature, top_p)?;
    let u: f64 = rng.random::<f64>() * n.mass;
    let mut acc = 0.0;
    let mut last = None;
    for (s, live, w) in n.blocks() {
        let kept = n.kept_lanes(s, live, w);
        if kept == 0 {
            continue;
        }
        let mut lanes = [0.0f64; LANES];
        for (j, (l, &w)) in lanes.iter_mut().zip(w).enumerate() {
            *l = if kept >> j & 1 == 1 { w as f64 } else { 0.0 };
        }
        let block = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
        if u < acc + block {
            for j in (0..LANES).filter(|&j| kept >> j & 1 == 1) {
                acc += lanes[j];
                last = Some(s + j as TokenId);
                if u < acc {
                    break;
                }
            }
            // rounding inside the block lands on its last kept lane
            break;
        }
        acc += block;
        last = Some(s + (LANES - 1 - kept.leading_zeros() as usize) as TokenId);
    }
    Ok(last.expect("non-empty nucleus"))
}

/// Lowest id among the maximal unmasked logits.
pub fn argmax(logits: &[f32]) -> Result<TokenId, DecodeError> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &l) in logits.iter().enumerate() {
        if is_masked(l) {
            continue;
        }
        if best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    best.map(|(i, _)| i as TokenId).ok_or(DecodeError::EmptySupport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoding::MASKED;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_finite_logit_always_wins() {
        let mut logits = vec![MASKED; 20];
        logits[13] = -3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(sample(&logits, 1.0, 0.9, &mut rng).unwrap(), 13);
        }
    }

    #[test]
    fn all_masked_is_empty_support() {
        let logits = vec![MASKED; 5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample(&logits, 1.0, 1.0, &mut rng),
            Err(DecodeError::EmptySupport)
        ));
        assert!(matches!(argmax(&logits), Err(DecodeError::EmptySupport)));
    }

    #[test]
    fn greedy_limit() {
        let logits = [0.1, 2.0, 2.0, -1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            assert_eq!(sample(&logits, 1e-7, 0.5, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        let k = 8;
        let draws = 100_000;
        let logits = vec![0.25f32; k];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0usize; k];
        for _ in 0..draws {
            counts[sample(&logits, 1.0, 1.0, &mut rng).unwrap() as usize] += 1;
        }
        let p = 1.0 / k as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "count {c} vs {mean}");
        }
    }

    #[test]
    fn nucleus_is_minimal_prefix() {
        // probabilities 0.5, 0.25, 0.125, 0.125
        let logits = [
            (0.5f32).ln(),
            (0.125f32).ln(),
            (0.25f32).ln(),
            (0.125f32).ln(),
        ];
        let ids = |p: f32| -> Vec<TokenId> {
            nucleus(&logits, 1.0, p).unwrap().into_iter().map(|c| c.0).collect()
        };
        assert_eq!(ids(0.4), vec![0]);
        assert_eq!(ids(0.5), vec![0]);
        assert_eq!(ids(0.6), vec![0, 2]);
        assert_eq!(ids(0.7), vec![0, 2]);
        assert_eq!(ids(0.8), vec![0, 1, 2]);
        assert_eq!(ids(1.0), vec![0, 1, 2, 3]);
        let set = nucleus(&logits, 1.0, 0.6).unwrap();
        assert!((set[0].1 - 2.0 / 3.0).abs() < 1e-9);
    }

    fn sorted_nucleus(logits: &[f32], top_p: f64) -> Vec<TokenId> {
        let mut c: Vec<(TokenId, f64)> = logits
            .iter()
            .enumerate()
            .filter(|(_, &l)| !is_masked(l))
            .map(|(i, &l)| (i as TokenId, (l as f64).exp()))
            .collect();
        let total: f64 = c.iter().map(|x| x.1).sum();
        c.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut mass = 0.0;
        let mut out = Vec::new();
        for (id, w) in c {
            out.push(id);
            mass += w;
            if mass >= top_p * total {
                break;
            }
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn fast_exp_tracks_std() {
        let mut xs: Vec<f32> = (0..=200_000).map(|i| -87.0 * i as f32 / 200_000.0).collect();
        xs.extend([0.0, -0.0, -1e-30, -87.5, -1e4, f32::MIN]);
        let mut ys = xs.clone();
        exp_nonpositive(&mut ys);
        for (&x, &y) in xs.iter().zip(&ys) {
            let want = x.exp();
            if x < -87.0 {
                assert_eq!(y, 0.0);
                continue;
            }
            let ulps = (y.to_bits() as i64 - want.to_bits() as i64).abs();
            assert!(ulps <= 2, "exp({x}) = {y}, want {want}");
        }
        assert_eq!(ys[xs.len() - 6], 1.0);
    }

    #[test]
    fn selection_agrees_with_sorting() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..300 {
            let n = rng.random_range(1..3000);
            let logits: Vec<f32> = (0..n)
                .map(|_| match rng.random_range(0..10) {
                    0 => MASKED,
                    // coarse values force ties
                    1..=3 => rng.random_range(0..4) as f32,
                    _ => rng.random_range(-5.0..5.0),
                })
                .collect();
            if logits.iter().all(|&l| is_masked(l)) {
                continue;
            }
            let p: f32 = [0.1, 0.5, 0.9, 0.98, 1.0][trial % 5];
            let got: Vec<TokenId> = nucleus(&logits, 1.0, p).unwrap().into_iter().map(|c| c.0).collect();
            assert_eq!(got, sorted_nucleus(&logits, p as f64), "trial {trial}");
        }
    }

    #[test]
    fn temperature_sharpens() {
        let logits = [1.0f32, 0.0];
        let cold = nucleus(&logits, 0.25, 1.0).unwrap();
        let hot = nucleus(&logits, 4.0, 1.0).unwrap();
        assert!(cold[0].1 > hot[0].1);
        assert!((cold[0].1 - 1.0 / (1.0 + (-4.0f64).exp())).abs() < 1e-9);
    }
}
