//! Property bodies shared by the proptest suite and the acceptance runner.
//! Each takes its random dimensions plus a seed and reports a violation as `Err`.

use micacl_core::geiim::build_adjacency;
use micacl_core::mccl::{
    cet_loss, class_weights, contrastive_loss_scale, dynamic_temperature, mccl_loss,
    similarity_matrix, ClassStats, ScaleSet,
};
use micacl_core::metrics::MetricsReport;
use micacl_core::tape::Tape;
use micacl_core::wian::instance_weights;
use micacl_core::{Rng, Tensor};

use super::{brute_contrastive, brute_similarity, rand_tensor};

type Check = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn labels_with(b: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    (0..b).map(|_| rng.below(k)).collect()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let w = t.len() / t.shape()[0];
    let data = perm
        .iter()
        .flat_map(|&i| t.data()[i * w..(i + 1) * w].to_vec())
        .collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

pub fn adjacency_row_stochastic(t: usize, d: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut tape = Tape::new();
    let n1 = tape.constant(rand_tensor(&[t, d], -3.0, 3.0, &mut rng));
    let n2 = tape.constant(rand_tensor(&[d, t], -3.0, 3.0, &mut rng));
    let a = build_adjacency(&mut tape, n1, n2).map_err(|e| e.to_string())?;
    let a = tape.value(a);
    for r in 0..t {
        let row = &a.data()[r * t..(r + 1) * t];
        ensure(row.iter().all(|&v| v >= 0.0), || {
            format!("negative entry in row {r}")
        })?;
        let s: f64 = row.iter().sum();
        ensure((s - 1.0).abs() < 1e-12, || format!("row {r} sums to {s}"))?;
    }
    Ok(())
}

pub fn instance_weights_normalized(b: usize, t: usize, c: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut tape = Tape::new();
    let h = tape.constant(rand_tensor(&[b, t, c], -5.0, 5.0, &mut rng));
    let w = instance_weights(&mut tape, h).map_err(|e| e.to_string())?;
    for (i, row) in tape.value(w).data().chunks(c).enumerate() {
        let s: f64 = row.iter().sum();
        ensure(
            row.iter().all(|&v| v > 0.0) && (s - 1.0).abs() < 1e-12,
            || format!("weight row {i} sums to {s}"),
        )?;
    }
    Ok(())
}

pub fn similarity_structure(b: usize, e: usize, tau: f64, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let x = rand_tensor(&[b, e], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = similarity_matrix(&mut tape, xv, tau).map_err(|e| e.to_string())?;
    let s = tape.value(s).data().to_vec();
    let oracle = brute_similarity(&x, tau);
    for i in 0..b {
        ensure(
            (s[i * b + i] - 1.0 / tau).abs() < 1e-12 * (1.0 / tau),
            || format!("diagonal {i} is {}", s[i * b + i]),
        )?;
        for j in 0..b {
            let v = s[i * b + j];
            ensure(v == s[j * b + i], || format!("asymmetric at ({i},{j})"))?;
            ensure(v.abs() <= 1.0 / tau * (1.0 + 1e-12), || {
                format!("entry ({i},{j}) = {v} out of range")
            })?;
            ensure((v - oracle[i * b + j]).abs() < 1e-12 / tau, || {
                format!("entry ({i},{j}) = {v}, oracle {}", oracle[i * b + j])
            })?;
        }
    }
    // cosine normalization: positive row scaling leaves S unchanged
    let scales: Vec<f64> = (0..b).map(|_| rng.uniform_in(0.01, 100.0)).collect();
    let scaled: Vec<f64> = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * scales[i / e])
        .collect();
    let xs = tape.constant(Tensor::new(vec![b, e], scaled).unwrap());
    let s2 = similarity_matrix(&mut tape, xs, tau).map_err(|e| e.to_string())?;
    let diff = tape
        .value(s2)
        .data()
        .iter()
        .zip(&s)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(diff < 1e-10, || format!("row scaling changed S by {diff}"))
}

/// Random embeddings, labels and anchor weights.
fn random_batch(b: usize, k: usize, e: usize, rng: &mut Rng) -> (Tensor, Vec<usize>, Vec<f64>) {
    let x = rand_tensor(&[b, e], -2.0, 2.0, rng);
    let labels = labels_with(b, k, rng);
    let w: Vec<f64> = (0..b).map(|_| rng.uniform_in(0.0, 1.0)).collect();
    (x, labels, w)
}

pub fn contrastive_matches_oracle(b: usize, k: usize, e: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let (x, labels, w) = random_batch(b, k, e, &mut rng);
    let tau = rng.uniform_in(0.05, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let s = similarity_matrix(&mut tape, xv, tau).map_err(|e| e.to_string())?;
    let loss = contrastive_loss_scale(&mut tape, s, &labels, &Tensor::vector(w.clone()), false)
        .map_err(|e| e.to_string())?;
    let got = tape.value(loss).item();
    let want = brute_contrastive(tape.value(s).data(), &labels, &w);
    ensure((got - want).abs() < 1e-10, || {
        format!("loss {got}, oracle {want} (labels {labels:?})")
    })?;

    let all_have_positive = labels
        .iter()
        .all(|y| labels.iter().filter(|&z| z == y).count() >= 2);
    if all_have_positive && w.iter().all(|&v| v > 0.0) {
        ensure(got < 0.0, || {
            format!("loss {got} not negative though every anchor has positives")
        })?;
    }
    Ok(())
}

/// `mccl_loss` equals the mean over scales of the single-scale losses.
pub fn mccl_is_scale_average(b: usize, k: usize, e: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let ch = 8;
    let x_bag = rand_tensor(&[b, ch], -2.0, 2.0, &mut rng);
    let labels = labels_with(b, k, &mut rng);
    let logits = rand_tensor(&[b, k], -2.0, 2.0, &mut rng);
    let counts: Vec<usize> = (0..k).map(|_| 1 + rng.below(20)).collect();
    let stats = ClassStats::new(counts, rng.uniform_in(0.05, 0.5)).map_err(|e| e.to_string())?;
    let set = ScaleSet::init(&[1, 3, 8], ch, e, &mut rng).map_err(|e| e.to_string())?;

    let mut tape = Tape::new();
    let sv = set.bind(&mut tape);
    let xv = tape.constant(x_bag);
    let total = mccl_loss(&mut tape, xv, &labels, &stats, &logits, &sv, false)
        .map_err(|e| e.to_string())?;
    let total = tape.value(total).item();

    let w = class_weights(&stats, &logits, &labels).map_err(|e| e.to_string())?;
    let tau = dynamic_temperature(&stats);
    let mut sum = 0.0;
    for (i, &s) in set.scales.iter().enumerate() {
        let single = ScaleSet {
            scales: vec![s],
            proj: vec![set.proj[i].clone()],
        };
        let sv = single.bind(&mut tape);
        let one = mccl_loss(&mut tape, xv, &labels, &stats, &logits, &sv, false)
            .map_err(|e| e.to_string())?;
        let one = tape.value(one).item();
        let pooled =
            micacl_core::mccl::multiscale_project(&mut tape, xv, &sv).map_err(|e| e.to_string())?;
        let sm = similarity_matrix(&mut tape, pooled[0], tau).map_err(|e| e.to_string())?;
        let direct =
            contrastive_loss_scale(&mut tape, sm, &labels, &w, false).map_err(|e| e.to_string())?;
        ensure(one == tape.value(direct).item(), || {
            "single-scale mismatch".into()
        })?;
        sum += one;
    }
    let mean = sum / set.scales.len() as f64;
    ensure((total - mean).abs() < 1e-12, || {
        format!("mccl {total} vs per-scale mean {mean}")
    })
}

/// Every loss is unchanged by reordering the batch.
pub fn losses_permutation_invariant(b: usize, k: usize, e: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let ch = 8;
    let x_bag = rand_tensor(&[b, ch], -2.0, 2.0, &mut rng);
    let labels = labels_with(b, k, &mut rng);
    let logits = rand_tensor(&[b, k], -2.0, 2.0, &mut rng);
    let counts: Vec<usize> = (0..k).map(|_| 1 + rng.below(20)).collect();
    let stats = ClassStats::new(counts, 0.1).map_err(|e| e.to_string())?;
    let set = ScaleSet::init(&[1, 4, 8], ch, e, &mut rng).map_err(|e| e.to_string())?;
    let mut perm: Vec<usize> = (0..b).collect();
    rng.shuffle(&mut perm);

    let eval =
        |x: &Tensor, lab: &[usize], lg: &Tensor, log_form: bool| -> Result<[f64; 2], String> {
            let mut tape = Tape::new();
            let sv = set.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let lv = tape.constant(lg.clone());
            let mc = mccl_loss(&mut tape, xv, lab, &stats, lg, &sv, log_form)
                .map_err(|e| e.to_string())?;
            let ce = cet_loss(&mut tape, lv, lab).map_err(|e| e.to_string())?;
            Ok([tape.value(mc).item(), tape.value(ce).item()])
        };
    let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    for log_form in [false, true] {
        let a = eval(&x_bag, &labels, &logits, log_form)?;
        let p = eval(
            &permute_rows(&x_bag, &perm),
            &plabels,
            &permute_rows(&logits, &perm),
            log_form,
        )?;
        for (name, u, v) in [("mccl", a[0], p[0]), ("cet", a[1], p[1])] {
            ensure((u - v).abs() < 1e-12, || {
                format!("{name} changed from {u} to {v} under {perm:?}")
            })?;
        }
    }
    Ok(())
}

pub fn temperature_bounds(k: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let tau0 = rng.uniform_in(0.01, 2.0);
    let balanced = rng.below(4) == 0;
    let n = 1 + rng.below(50);
    let counts: Vec<usize> = (0..k)
        .map(|_| if balanced { n } else { 1 + rng.below(50) })
        .collect();
    let all_equal = counts.iter().all(|&c| c == counts[0]);
    let tau =
        dynamic_temperature(&ClassStats::new(counts.clone(), tau0).map_err(|e| e.to_string())?);
    ensure(tau > tau0 && tau <= 2.0 * tau0 * (1.0 + 1e-15), || {
        format!("tau {tau} for {counts:?}")
    })?;
    if all_equal {
        ensure((tau - 2.0 * tau0).abs() < 1e-12, || {
            format!("balanced tau {tau} != 2 tau0")
        })
    } else {
        ensure(tau < 2.0 * tau0, || {
            format!("imbalanced tau {tau} reached 2 tau0")
        })
    }
}

/// Class weight falls strictly with the class count and with the true-class probability.
pub fn class_weight_monotone(seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let n_small = 1 + rng.below(30);
    let n_large = n_small + 1 + rng.below(30);
    let z_low = rng.uniform_in(-3.0, 2.0);
    let z_high = z_low + rng.uniform_in(0.01, 2.0);
    let w = |n: usize, z: f64| -> Result<f64, String> {
        let stats = ClassStats::new(vec![n, 5], 0.1).map_err(|e| e.to_string())?;
        let logits = Tensor::from_rows(&[&[z, 0.0]]);
        Ok(class_weights(&stats, &logits, &[0])
            .map_err(|e| e.to_string())?
            .data()[0])
    };
    ensure(w(n_small, z_low)? > w(n_large, z_low)?, || {
        format!("not decreasing in count {n_small}->{n_large}")
    })?;
    ensure(w(n_small, z_low)? > w(n_small, z_high)?, || {
        format!("not decreasing in probability {z_low}->{z_high}")
    })
}

pub fn war_uar_identities(k: usize, seed: u64) -> Check {
    let mut rng = Rng::new(seed);
    let mut confusion = vec![vec![0u64; k]; k];
    for row in confusion.iter_mut() {
        if rng.below(4) == 0 {
            continue;
        }
        for v in row.iter_mut() {
            *v = rng.below(12) as u64;
        }
    }
    if confusion.iter().flatten().sum::<u64>() == 0 {
        confusion[0][0] = 1;
    }
    let m = MetricsReport::from_confusion(confusion.clone()).map_err(|e| e.to_string())?;

    let mut pairs = Vec::new();
    for (t, row) in confusion.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((t, p), n as usize));
        }
    }
    rng.shuffle(&mut pairs);
    let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let m2 = MetricsReport::from_predictions(k, &truth, &pred).map_err(|e| e.to_string())?;
    ensure(m == m2, || "confusion and prediction paths disagree".into())?;

    let correct = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64;
    let war = correct / truth.len() as f64;
    let mut recalls = Vec::new();
    for c in 0..k {
        let n = truth.iter().filter(|&&t| t == c).count();
        if n > 0 {
            let hit = truth
                .iter()
                .zip(&pred)
                .filter(|(&t, &p)| t == c && p == c)
                .count();
            recalls.push(hit as f64 / n as f64);
        }
    }
    let uar = recalls.iter().sum::<f64>() / recalls.len() as f64;
    ensure(m.war == war && (m.uar - uar).abs() < 1e-15, || {
        format!("war {} vs {war}, uar {} vs {uar}", m.war, m.uar)
    })?;
    ensure(
        (0.0..=1.0).contains(&m.war) && (0.0..=1.0).contains(&m.uar),
        || "metric out of [0, 1]".into(),
    )
}
