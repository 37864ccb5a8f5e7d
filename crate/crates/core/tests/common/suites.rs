//! Oracle suites shared by the module tests and the acceptance target.
//! Each returns a short summary on success and a description of the first
//! disagreement otherwise.

use dpmkit::config::{EvalConfig, LossConfig, SptConfig};
use dpmkit::evaluator::{evaluate, Embedded};
use dpmkit::losses::{self, BatchLabels, Stage3Vars};
use dpmkit::params::stream_rng;
use dpmkit::spt::{self, SaliencyMask};
use dpmkit_autograd::{gradcheck, GradCheckConfig, GradCheckReport, Graph, Matrix, Var};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_SAMPLES: usize = 16;
pub const GRAD_TOL: f64 = 1e-5;

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

/// Four identities, two samples each; sample 0 is synthesized with identity 2 as occluder source.
fn labels_with_candidate() -> BatchLabels {
    let mut l = BatchLabels::clean(vec![0, 0, 1, 1, 2, 2, 3, 3], vec![0, 1, 0, 1, 2, 3, 2, 3]);
    l.synthetic[0] = true;
    l.candidates[0] = Some(2);
    l
}

fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Graph, &[Var]) -> Var) -> GradCheckReport {
    gradcheck(
        &inputs,
        f,
        &GradCheckConfig {
            samples: GRAD_SAMPLES,
            ..Default::default()
        },
    )
}

/// Finite-difference reports for every loss and both stage aggregates.
pub fn gradient_suite() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = stream_rng(7, "suite/grad");
    let (b, c, k) = (8, 6, 4);
    let feats = uniform(&mut rng, b, c, -1.0, 1.0);
    let protos = uniform(&mut rng, k, c, -1.0, 1.0);
    let masks = uniform(&mut rng, b, c, 0.1, 0.9);
    let att_a = uniform(&mut rng, 4, 12, 0.05, 1.0);
    let att_b = uniform(&mut rng, 4, 12, 0.05, 1.0);
    let soft = uniform(&mut rng, 24, 1, 0.05, 0.95);
    let weight = uniform(&mut rng, c, k, -1.0, 1.0);
    let bias = uniform(&mut rng, 1, k, -0.5, 0.5);
    let labels = labels_with_candidate();
    let cfg = LossConfig {
        alpha: 0.5,
        beta: 0.1,
        ..Default::default()
    };
    let mut out = Vec::new();

    out.push((
        "coarse identity",
        check(vec![feats.clone(), protos.clone()], |g, v| {
            losses::coarse_id_graph(g, v[0], v[1], &labels).unwrap()
        }),
    ));
    out.push((
        "prototype identity",
        check(vec![feats.clone(), protos.clone()], |g, v| {
            losses::proto_id_graph(g, v[0], v[1], &labels).unwrap()
        }),
    ));
    out.push((
        "masked identity",
        check(
            vec![feats.clone(), protos.clone(), masks.clone()],
            |g, v| losses::masked_id_graph(g, v[0], v[1], v[2], &labels, &cfg).unwrap(),
        ),
    ));
    out.push((
        "triplet",
        check(vec![feats.clone()], |g, v| {
            losses::triplet_graph(g, v[0], &labels, 0.3).unwrap()
        }),
    ));
    out.push((
        "hem",
        check(vec![att_a.clone()], |g, v| {
            losses::hem_graph(g, v[0]).unwrap()
        }),
    ));
    out.push((
        "hem batch",
        check(vec![att_a.clone(), att_b.clone()], |g, v| {
            losses::hem_batch_graph(g, &[v[0], v[1]]).unwrap()
        }),
    ));
    out.push((
        "budget signed",
        check(vec![soft.clone()], |g, v| {
            losses::budget_graph(g, v[0], 0.3, false)
        }),
    ));
    out.push((
        "budget absolute",
        check(vec![soft.clone()], |g, v| {
            losses::budget_graph(g, v[0], 0.3, true)
        }),
    ));
    out.push((
        "stage II aggregate",
        check(vec![feats.clone(), weight, bias, soft], |g, v| {
            let id = losses::linear_id_graph(g, v[0], v[1], v[2], &labels).unwrap();
            let tri = losses::triplet_graph(g, v[0], &labels, 0.3).unwrap();
            let budget = losses::budget_graph(g, v[3], 0.3, false);
            losses::stage2_graph(g, id, tri, budget)
        }),
    ));
    out.push((
        "stage III aggregate",
        check(
            vec![feats, protos.clone(), protos, masks, att_a, att_b],
            |g, v| {
                let id_c = losses::coarse_id_graph(g, v[0], v[1], &labels).unwrap();
                let id_p = losses::proto_id_graph(g, v[0], v[2], &labels).unwrap();
                let id_m = losses::masked_id_graph(g, v[0], v[2], v[3], &labels, &cfg).unwrap();
                let tri = losses::triplet_graph(g, v[0], &labels, 0.3).unwrap();
                let hem = losses::hem_batch_graph(g, &[v[4], v[5]]).unwrap();
                losses::stage3_graph(
                    g,
                    &Stage3Vars {
                        id_c,
                        id_p,
                        id_m: Some(id_m),
                        tri,
                        hem: Some(hem),
                    },
                    &cfg,
                )
            },
        ),
    ));
    out
}

fn random_mask(rng: &mut ChaCha8Rng, grid: (usize, usize)) -> Vec<bool> {
    let p = rng.random_range(0.1..0.9);
    (0..grid.0 * grid.1).map(|_| rng.random_bool(p)).collect()
}

fn count(a: &[bool], b: &[bool], both: bool) -> usize {
    let mut n = 0;
    for i in 0..a.len() {
        if (both && a[i] && b[i]) || (!both && (a[i] || b[i])) {
            n += 1;
        }
    }
    n
}

/// Cell value of `mask` shifted right by `s` columns, read at `(r, c)`.
fn shifted(mask: &[bool], grid: (usize, usize), s: usize, r: usize, c: usize) -> bool {
    let w = grid.1;
    mask[r * w + (c + w - s % w) % w]
}

struct Rolled {
    score: f64,
    shift: usize,
}

fn rolled_oracle(target: &[bool], cand: &[bool], grid: (usize, usize), stride: usize) -> Rolled {
    let area = cand.iter().filter(|&&x| x).count();
    let mut best = Rolled {
        score: -1.0,
        shift: 0,
    };
    let mut s = 0;
    while s < grid.1 {
        let mut inter = 0;
        for r in 0..grid.0 {
            for c in 0..grid.1 {
                if shifted(target, grid, s, r, c) && cand[r * grid.1 + c] {
                    inter += 1;
                }
            }
        }
        let score = inter as f64 / area as f64;
        if score > best.score {
            best = Rolled { score, shift: s };
        }
        s += stride;
    }
    best
}

/// `iou`, `oiou` and `max_rolled_oiou` against cell counting and exhaustive
/// shift enumeration on random grids up to 8×16.
pub fn overlap_oracle(pairs: usize, seed: u64) -> Result<String, String> {
    let mut rng = stream_rng(seed, "suite/overlap");
    let mut empties = 0;
    for n in 0..pairs {
        let grid = (rng.random_range(1..=8), rng.random_range(1..=16));
        let a = random_mask(&mut rng, grid);
        let b = random_mask(&mut rng, grid);
        let union = count(&a, &b, false);
        let inter = count(&a, &b, true);
        match spt::iou(&a, &b) {
            Ok(v) if union > 0 && v == inter as f64 / union as f64 => {}
            Err(dpmkit::Error::UndefinedMeasure(_)) if union == 0 => {}
            other => return Err(format!("pair {n}: iou {other:?}, oracle {inter}/{union}")),
        }
        let area = b.iter().filter(|&&x| x).count();
        if area == 0 {
            empties += 1;
            if !matches!(spt::oiou(&a, &b), Err(dpmkit::Error::EmptyCandidate)) {
                return Err(format!("pair {n}: empty candidate accepted"));
            }
            continue;
        }
        let o = spt::oiou(&a, &b).map_err(|e| e.to_string())?;
        if o != inter as f64 / area as f64 {
            return Err(format!("pair {n}: oiou {o}, oracle {inter}/{area}"));
        }
        let stride = rng.random_range(1..=grid.1 + 1);
        let ma = SaliencyMask::from_binary(a.clone(), grid).map_err(|e| e.to_string())?;
        let mb = SaliencyMask::from_binary(b.clone(), grid).map_err(|e| e.to_string())?;
        let got = spt::max_rolled_oiou(&ma, &mb, stride).map_err(|e| e.to_string())?;
        let want = rolled_oracle(&a, &b, grid, stride);
        if got.score != want.score || got.shift != want.shift {
            return Err(format!(
                "pair {n} grid {grid:?} stride {stride}: rolled ({}, {}), oracle ({}, {})",
                got.score, got.shift, want.score, want.shift
            ));
        }
    }
    Ok(format!("{pairs} pairs ({empties} with empty candidate)"))
}

/// `select_candidates` against filter, sort and integer-ceiling truncation.
pub fn selection_oracle(batches: usize, seed: u64) -> Result<String, String> {
    let mut rng = stream_rng(seed, "suite/select");
    let fractions = [(1, 10), (1, 4), (3, 10), (1, 2), (1, 1)];
    let mut total = 0;
    for n in 0..batches {
        let grid = (rng.random_range(2..=8), rng.random_range(2..=8));
        let size = rng.random_range(2..=10);
        let ids: Vec<usize> = (0..size).map(|_| rng.random_range(0..4)).collect();
        let raw: Vec<Vec<bool>> = (0..size).map(|_| random_mask(&mut rng, grid)).collect();
        let masks: Vec<SaliencyMask> = raw
            .iter()
            .map(|m| SaliencyMask::from_binary(m.clone(), grid).unwrap())
            .collect();
        let (num, den) = fractions[rng.random_range(0..fractions.len())];
        let cfg = SptConfig {
            oiou_threshold: rng.random_range(0.0..0.8),
            roll_threshold: rng.random_range(0.0..0.9),
            roll_stride: rng.random_range(1..=3),
            top_fraction: num as f64 / den as f64,
            ..Default::default()
        };
        let mut want = Vec::new();
        for i in 0..size {
            for j in 0..size {
                let area = raw[j].iter().filter(|&&x| x).count();
                if ids[i] == ids[j] || area == 0 {
                    continue;
                }
                let o = count(&raw[i], &raw[j], true) as f64 / area as f64;
                let r = rolled_oracle(&raw[i], &raw[j], grid, cfg.roll_stride);
                if o >= cfg.oiou_threshold && r.score >= cfg.roll_threshold {
                    want.push((i, j, r.score));
                }
            }
        }
        // Insertion sort on (score desc, i, j).
        for x in 1..want.len() {
            let mut y = x;
            while y > 0 {
                let (a, b) = (want[y - 1], want[y]);
                let before = b.2 > a.2 || (b.2 == a.2 && (b.0, b.1) < (a.0, a.1));
                if !before {
                    break;
                }
                want.swap(y - 1, y);
                y -= 1;
            }
        }
        want.truncate((num * want.len()).div_ceil(den));
        let got = spt::select_candidates(&masks, &ids, &cfg).map_err(|e| e.to_string())?;
        let got: Vec<(usize, usize, f64)> = got
            .iter()
            .map(|p| (p.target, p.candidate, p.rolled))
            .collect();
        if got != want {
            return Err(format!("batch {n}: got {got:?}, oracle {want:?}"));
        }
        total += got.len();
    }
    Ok(format!("{batches} batches, {total} selected pairs"))
}

/// A random retrieval instance on a coarse integer lattice, so ties occur.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Embedded, Embedded) {
    let dim = rng.random_range(1..=3);
    let ids = rng.random_range(2..=6);
    let split = |rng: &mut ChaCha8Rng, n: usize| {
        let features = Array2::from_shape_fn((n, dim), |_| rng.random_range(0..3) as f64);
        let identities = (0..n).map(|_| rng.random_range(0..ids)).collect();
        let cameras = (0..n).map(|_| rng.random_range(0..3)).collect();
        Embedded {
            features,
            identities,
            cameras,
        }
    };
    let nq = rng.random_range(1..=6);
    let q = split(rng, nq);
    let ng = rng.random_range(2..=20);
    let g = split(rng, ng);
    (q, g)
}

/// Oracle (map, per-query AP of valid queries, cmc) by explicit enumeration.
pub fn metric_oracle(q: &Embedded, g: &Embedded, max_rank: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let mut aps = Vec::new();
    let mut first_hits = Vec::new();
    for qi in 0..q.features.nrows() {
        let d: Vec<f64> = (0..g.features.nrows())
            .map(|gj| {
                let mut s = 0.0;
                for k in 0..q.features.ncols() {
                    s += (q.features[[qi, k]] - g.features[[gj, k]]).powi(2);
                }
                s.sqrt()
            })
            .collect();
        // Selection by repeated minimum; the lower index wins ties.
        let mut left: Vec<usize> = (0..d.len()).collect();
        let mut ranked = Vec::new();
        while !left.is_empty() {
            let mut best = 0;
            for x in 1..left.len() {
                if d[left[x]] < d[left[best]] {
                    best = x;
                }
            }
            ranked.push(left.remove(best));
        }
        let valid: Vec<usize> = ranked
            .into_iter()
            .filter(|&j| !(g.identities[j] == q.identities[qi] && g.cameras[j] == q.cameras[qi]))
            .collect();
        let rel: Vec<bool> = valid
            .iter()
            .map(|&j| g.identities[j] == q.identities[qi])
            .collect();
        let hits = rel.iter().filter(|&&r| r).count();
        if hits == 0 {
            continue;
        }
        let mut ap = 0.0;
        for pos in 0..rel.len() {
            if rel[pos] {
                let prefix = rel[..=pos].iter().filter(|&&r| r).count();
                ap += prefix as f64 / (pos + 1) as f64;
            }
        }
        aps.push(ap / hits as f64);
        first_hits.push(rel.iter().position(|&r| r).unwrap());
    }
    let cmc = (0..max_rank)
        .map(|r| {
            if first_hits.is_empty() {
                0.0
            } else {
                first_hits.iter().filter(|&&f| f <= r).count() as f64 / first_hits.len() as f64
            }
        })
        .collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    (map, aps, cmc)
}

/// Evaluator against the enumeration oracle, plus CMC monotonicity.
pub fn retrieval_oracle(instances: usize, seed: u64) -> Result<String, String> {
    let mut rng = stream_rng(seed, "suite/metric");
    let mut worst: f64 = 0.0;
    for n in 0..instances {
        let (q, g) = random_instance(&mut rng);
        let cfg = EvalConfig {
            max_rank: 10,
            ..Default::default()
        };
        let report = evaluate(&q, &g, &cfg).map_err(|e| e.to_string())?;
        let (map, aps, cmc) = metric_oracle(&q, &g, cfg.max_rank);
        if aps.len() != report.per_query_ap.len() {
            return Err(format!(
                "instance {n}: {} valid queries, oracle {}",
                report.per_query_ap.len(),
                aps.len()
            ));
        }
        let diffs = std::iter::once((report.map, map))
            .chain(report.per_query_ap.iter().copied().zip(aps))
            .chain(report.cmc.iter().copied().zip(cmc));
        for (a, b) in diffs {
            worst = worst.max((a - b).abs());
        }
        if worst > 1e-9 {
            return Err(format!("instance {n}: deviation {worst:e}"));
        }
        if report.cmc.windows(2).any(|w| w[1] < w[0]) {
            return Err(format!("instance {n}: CMC decreases: {:?}", report.cmc));
        }
    }
    Ok(format!("{instances} instances, max deviation {worst:e}"))
}

/// Masked-branch logits with an all-ones mask against the unmasked cosine
/// logits shifted by the margin and scaled.
pub fn all_ones_mask_identity(seed: u64) -> Result<String, String> {
    let mut rng = stream_rng(seed, "suite/mask-ones");
    let (b, c, k) = (8, 6, 4);
    let feats = uniform(&mut rng, b, c, -1.0, 1.0);
    let protos = uniform(&mut rng, k, c, -1.0, 1.0);
    let labels = labels_with_candidate();
    let cfg = LossConfig::default();

    let mut g = Graph::new();
    let f = g.constant(feats.clone());
    let p = g.constant(protos.clone());
    let m = g.constant(Array2::ones((b, c)));
    let masked =
        losses::masked_logits_graph(&mut g, f, p, m, &labels, &cfg).map_err(|e| e.to_string())?;
    let masked = g.value(masked).clone();

    let norm = |r: ndarray::ArrayView1<f64>| r.dot(&r).sqrt();
    let mut worst: f64 = 0.0;
    for i in 0..b {
        for j in 0..k {
            let cos = feats.row(i).dot(&protos.row(j)) / (norm(feats.row(i)) * norm(protos.row(j)));
            let margin = if labels.identities[i] == j {
                cfg.margin
            } else {
                0.0
            };
            worst = worst.max((masked[[i, j]] - cfg.scale * (cos - margin)).abs());
        }
    }
    let ones = Array2::ones((b, c));
    let loss =
        losses::masked_id_loss(&feats, &protos, &ones, &labels, &cfg).map_err(|e| e.to_string())?;
    let mut want = 0.0;
    for i in 0..b {
        let keep = |j: usize| labels.candidates[i] != Some(j);
        let logit = |j: usize| {
            let cos = feats.row(i).dot(&protos.row(j)) / (norm(feats.row(i)) * norm(protos.row(j)));
            cfg.scale
                * (cos
                    - if labels.identities[i] == j {
                        cfg.margin
                    } else {
                        0.0
                    })
        };
        let z: f64 = (0..k).filter(|&j| keep(j)).map(|j| logit(j).exp()).sum();
        want -= (logit(labels.identities[i]).exp() / z).ln();
    }
    want /= b as f64;
    worst = worst.max((loss - want).abs());
    if worst > 1e-6 {
        return Err(format!("max deviation {worst:e}"));
    }
    Ok(format!("max deviation {worst:.1e}"))
}
