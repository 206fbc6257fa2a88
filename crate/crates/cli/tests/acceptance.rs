//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS or FAIL line, in order.

use std::collections::VecDeque;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gridpix_core::color::rgb_to_lab;
use gridpix_core::gradcheck::{run_suite, GradCheckConfig};
use gridpix_core::grid::{compute_centers, csp_centers, AssociationMap, GridSpec, NEIGHBORS};
use gridpix_core::metrics::{asa, boundary_recall_precision, boundary_tolerance, compactness};
use gridpix_core::net::{flip_equivariance_gap, NetworkSpec, TrainConfig, TrainSample, Trainer};
use gridpix_core::sampling::{compare_upsamplers, downsample, upsample};
use gridpix_core::segmentation::{enforce_connectivity, hard_assign, locality_violations, Connectivity, LabelMap};
use gridpix_core::slic::{slic, SlicConfig};
use gridpix_core::synthetic::{corpus, write_corpus, MosaicConfig, Scene};
use gridpix_core::{SpixelNet32, Tensor};

const CORPUS_SEED: u64 = 2024;
const CORPUS_SIZE: usize = 200;
const HELD_OUT: usize = 40;
const CELL: usize = 8;
const ITERATIONS: usize = 5000;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn random_assoc(grid: GridSpec, rng: &mut ChaCha8Rng, sharpness: f64) -> AssociationMap<f64> {
    let scores = Tensor::from_fn(&[grid.height, grid.width, NEIGHBORS], |_| (sharpness * rng.random::<f64>()).exp());
    AssociationMap::from_scores(scores, grid).unwrap()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(&GradCheckConfig::with_seed(7)).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let covered = ["slic_loss", "semantic_loss", "joint_loss", "network_parameters"]
        .iter()
        .all(|name| report.results.iter().any(|r| r.name == *name));
    let enough = report.results.iter().all(|r| r.coordinates >= 20);
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        report.passed() && covered && enough && secs < 120.0,
        format!("{} checks, worst relative error {worst:.2e}, {secs:.1}s", report.results.len()),
    )
}

fn csp_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let s = [2, 4, 8][i % 3];
        let (h, w) = (rng.random_range(1..=4) * s, rng.random_range(1..=4) * s);
        let grid = GridSpec::new(h, w, s).unwrap();
        let q = random_assoc(grid, &mut rng, 4.0);
        let c = rng.random_range(1..=4);
        let image = Tensor::from_fn(&[h, w, c], |_| rng.random_range(-1.0..1.0));
        let a = compute_centers(&q, &image).unwrap();
        let b = csp_centers(&q, &image).unwrap();
        for (x, y) in a.properties.data().iter().zip(b.properties.data()) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in a.locations.data().iter().zip(b.locations.data()) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(worst <= 1e-6, format!("100 instances, max deviation {worst:.2e}"))
}

/// Per-label bounding boxes as (min_x, max_x, min_y, max_y).
fn bounding_boxes(labels: &LabelMap) -> Vec<(usize, usize, usize, usize)> {
    let n = labels.max_label().unwrap() as usize + 1;
    let mut boxes = vec![(usize::MAX, 0, usize::MAX, 0); n];
    for y in 0..labels.height {
        for x in 0..labels.width {
            let b = &mut boxes[labels.get(x, y) as usize];
            *b = (b.0.min(x), b.1.max(x), b.2.min(y), b.3.max(y));
        }
    }
    boxes.into_iter().filter(|b| b.0 != usize::MAX).collect()
}

fn association_invariants(trained: &SpixelNet32, scenes: &[Scene<f32>]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let untrained = SpixelNet32::new(NetworkSpec::default(), 99).unwrap();
    let mut passes = 0;
    let (mut worst_sum, mut violations, mut oversized) = (0.0f64, 0usize, 0usize);
    let mut check = |assoc: &AssociationMap<f32>| {
        for px in assoc.probs().data().chunks_exact(NEIGHBORS) {
            let total: f64 = px.iter().map(|&v| v as f64).sum();
            worst_sum = worst_sum.max((total - 1.0).abs());
        }
        let grid = *assoc.grid();
        let labels = hard_assign(assoc);
        violations += locality_violations(&labels, &grid);
        let side = 3 * grid.cell_size;
        oversized += bounding_boxes(&labels).iter().filter(|b| b.1 - b.0 + 1 > side || b.3 - b.2 + 1 > side).count();
        passes += 1;
    };
    for (h, w, s) in [(64, 64, 8), (32, 96, 16), (48, 80, 4), (16, 16, 2)] {
        let image = Tensor::from_fn(&[h, w, 3], |_| rng.random::<f32>());
        check(&untrained.predict(&image, s).unwrap());
        check(&trained.predict(&image, s).unwrap());
    }
    let mut flip_gap = 0.0;
    for scene in scenes {
        check(&trained.predict(&scene.image, CELL).unwrap());
        flip_gap += flip_equivariance_gap(trained, &scene.image, CELL).unwrap() / scenes.len() as f64;
    }
    // the mirror gap is reported only; it is not part of the pass condition
    outcome(
        worst_sum <= 1e-6 && violations == 0 && oversized == 0,
        format!(
            "{passes} forward passes, max |sum - 1| {worst_sum:.1e}, {violations} locality violations, \
             {oversized} superpixels beyond 3S, mean horizontal mirror gap {flip_gap:.4}"
        ),
    )
}

/// Independent breadth-first component labeling: returns the pixel lists of
/// every 4-connected component.
fn flood_components(labels: &LabelMap) -> Vec<Vec<usize>> {
    let (w, h) = (labels.width, labels.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p);
            let (x, y) = (p % w, p / w);
            let mut nbrs = Vec::with_capacity(4);
            if x > 0 {
                nbrs.push(p - 1);
            }
            if x + 1 < w {
                nbrs.push(p + 1);
            }
            if y > 0 {
                nbrs.push(p - w);
            }
            if y + 1 < h {
                nbrs.push(p + w);
            }
            for q in nbrs {
                if !seen[q] && labels.labels[q] == labels.labels[p] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push(pixels);
    }
    out
}

fn connectivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut small, mut split, mut maps) = (0, 0, 0);
    for i in 0..50 {
        let s = [4, 8][i % 2];
        let grid = GridSpec::new(s * rng.random_range(3..=6), s * rng.random_range(3..=6), s).unwrap();
        let raw = hard_assign(&random_assoc(grid, &mut rng, 3.0));
        let cfg = Connectivity { keep_fragments: i % 3 == 0, ..Connectivity::new(s as f64) };
        let out = enforce_connectivity(&raw, &cfg);
        let comps = flood_components(&out);
        small += comps.iter().filter(|c| (c.len() as f64) < cfg.threshold()).count();
        split += comps.len() - out.n_labels();
        maps += 1;
    }
    outcome(small == 0 && split == 0, format!("{maps} maps, {small} undersized components, {split} split labels"))
}

fn asa_oracle(p: &LabelMap, g: &LabelMap) -> f64 {
    let mut hits = 0;
    for sp in 0..=p.max_label().unwrap() {
        let mut counts = vec![0usize; g.max_label().unwrap() as usize + 1];
        for i in 0..p.len() {
            if p.labels[i] == sp {
                counts[g.labels[i] as usize] += 1;
            }
        }
        hits += counts.into_iter().max().unwrap();
    }
    hits as f64 / p.len() as f64
}

fn boundary_pixels(l: &LabelMap) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..l.height {
        for x in 0..l.width {
            let v = l.get(x, y);
            let differs = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && nx < l.width as i64 && ny < l.height as i64 && l.get(nx as usize, ny as usize) != v
            });
            if differs {
                out.push((x, y));
            }
        }
    }
    out
}

fn matched_oracle(from: &[(usize, usize)], to: &[(usize, usize)], tol: usize) -> f64 {
    if from.is_empty() {
        return 1.0;
    }
    let hit = from
        .iter()
        .filter(|a| to.iter().any(|b| a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) <= tol))
        .count();
    hit as f64 / from.len() as f64
}

fn compactness_oracle(l: &LabelMap) -> f64 {
    let mut total = 0.0;
    for sp in 0..=l.max_label().unwrap() {
        let pixels: Vec<(usize, usize)> = (0..l.len()).filter(|&i| l.labels[i] == sp).map(|i| (i % l.width, i / l.width)).collect();
        if pixels.is_empty() {
            continue;
        }
        let mut perimeter = 0usize;
        for &(x, y) in &pixels {
            for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                let inside = nx >= 0 && ny >= 0 && nx < l.width as i64 && ny < l.height as i64;
                if !inside || l.get(nx as usize, ny as usize) != sp {
                    perimeter += 1;
                }
            }
        }
        let area = pixels.len() as f64;
        let quotient = (4.0 * std::f64::consts::PI * area / (perimeter * perimeter) as f64).min(1.0);
        total += area / l.len() as f64 * quotient;
    }
    total
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // every straight horizontal or vertical two-way split of a 6x6 image,
    // the two diagonal splits, and random labelings
    let mut family: Vec<LabelMap> = Vec::new();
    for cut in 1..6 {
        family.push(LabelMap::from_fn(6, 6, |x, _| u32::from(x >= cut)));
        family.push(LabelMap::from_fn(6, 6, |_, y| u32::from(y >= cut)));
    }
    family.push(LabelMap::from_fn(6, 6, |x, y| u32::from(x > y)));
    family.push(LabelMap::from_fn(6, 6, |x, y| u32::from(x + y >= 6)));
    family.push(LabelMap::from_fn(6, 6, |_, _| 0));
    for k in [2, 3, 5, 36] {
        family.push(LabelMap::from_fn(6, 6, |_, _| rng.random_range(0..k)));
    }
    let mut pairs: Vec<(LabelMap, LabelMap)> = Vec::new();
    for a in &family {
        for b in &family {
            pairs.push((a.clone(), b.clone()));
        }
    }
    for _ in 0..40 {
        let k = rng.random_range(2..40);
        let a = LabelMap::from_fn(16, 16, |_, _| rng.random_range(0..k));
        let b = LabelMap::from_fn(16, 16, |x, y| ((x / 5) + 4 * (y / 6)) as u32);
        pairs.push((a, b));
    }
    let (mut mismatches, mut co_err) = (0, 0.0f64);
    for (p, g) in &pairs {
        let (pb, gb) = (boundary_pixels(p), boundary_pixels(g));
        for tol in [0, 1, 2] {
            let s = boundary_recall_precision(p, g, tol).unwrap();
            if s.recall != matched_oracle(&gb, &pb, tol) || s.precision != matched_oracle(&pb, &gb, tol) {
                mismatches += 1;
            }
        }
        if asa(p, g).unwrap() != asa_oracle(p, g) {
            mismatches += 1;
        }
        co_err = co_err.max((compactness(p) - compactness_oracle(p)).abs());
    }
    let tol = boundary_tolerance(321, 481);
    outcome(
        mismatches == 0 && co_err <= 1e-9 && tol == 1,
        format!("{} pairs, {mismatches} exact mismatches, CO error {co_err:.1e}, 481x321 tolerance {tol} px", pairs.len()),
    )
}

struct Experiment {
    net: SpixelNet32,
    train_secs: f64,
    held_out: Vec<Scene<f32>>,
}

fn train_network() -> Experiment {
    let scenes = corpus::<f32>(CORPUS_SEED, CORPUS_SIZE, &MosaicConfig::default()).unwrap();
    let (train, held_out) = scenes.split_at(CORPUS_SIZE - HELD_OUT);
    let data: Vec<TrainSample<f32>> =
        train.iter().map(|s| TrainSample { image: s.image.clone(), labels: Some(s.labels.clone()) }).collect();
    let cfg = TrainConfig {
        cell_size: CELL,
        crop: (64, 64),
        learning_rate: 2e-3,
        iterations: ITERATIONS,
        batch_size: 4,
        m: 0.003,
        seed: 1,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let net = SpixelNet32::new(NetworkSpec::default(), 1).unwrap();
    let mut trainer = Trainer::new(net, &data, cfg).unwrap();
    trainer.run(|_| {}).unwrap();
    Experiment { net: trainer.into_net(), train_secs: start.elapsed().as_secs_f64(), held_out: held_out.to_vec() }
}

fn connected(labels: &LabelMap) -> LabelMap {
    enforce_connectivity(labels, &Connectivity::new(CELL as f64))
}

struct Scores {
    asa: f64,
    br: f64,
}

fn score(scenes: &[Scene<f32>], mut segment: impl FnMut(&Scene<f32>) -> LabelMap) -> Scores {
    let (mut a, mut br) = (0.0, 0.0);
    for s in scenes {
        let labels = segment(s);
        a += asa(&labels, &s.labels).unwrap();
        br += boundary_recall_precision(&labels, &s.labels, 1).unwrap().recall;
    }
    let n = scenes.len() as f64;
    Scores { asa: a / n, br: br / n }
}

fn network_scores(net: &SpixelNet32, scenes: &[Scene<f32>]) -> Scores {
    score(scenes, |s| connected(&hard_assign(&net.predict(&s.image, CELL).unwrap())))
}

fn desk_learning(exp: &Experiment) -> (Outcome, f64) {
    let trained = network_scores(&exp.net, &exp.held_out);
    let raw = score(&exp.held_out, |s| hard_assign(&exp.net.predict(&s.image, CELL).unwrap()));
    let untrained = network_scores(&SpixelNet32::new(NetworkSpec::default(), 1).unwrap(), &exp.held_out);
    let grid = score(&exp.held_out, |s| {
        let g = GridSpec::new(s.labels.height, s.labels.width, CELL).unwrap();
        hard_assign(&AssociationMap::<f32>::owning(g))
    });
    let passed = trained.asa >= 0.95
        && trained.asa >= untrained.asa + 0.03
        && trained.asa >= grid.asa + 0.03
        && trained.br > grid.br
        && exp.train_secs < 1800.0;
    let detail = format!(
        "held-out ASA {:.4} ({:.4} before connectivity; untrained {:.4}, grid {:.4}), BR {:.4} vs grid {:.4}, \
         {ITERATIONS} iterations in {:.0}s",
        trained.asa, raw.asa, untrained.asa, grid.asa, trained.br, grid.br, exp.train_secs
    );
    (outcome(passed, detail), trained.asa)
}

fn slic_sanity(exp: &Experiment, net_asa: f64) -> Outcome {
    let slic_scores = score(&exp.held_out, |s| {
        let lab = rgb_to_lab(&s.image).unwrap().values;
        slic(&lab, &SlicConfig::new(64)).unwrap().labels
    });
    let passed = (0.85..=1.0).contains(&slic_scores.asa) && net_asa >= slic_scores.asa - 0.02;
    outcome(passed, format!("SLIC K=64 ASA {:.4}, network ASA {net_asa:.4}", slic_scores.asa))
}

fn sampling_round_trip(exp: &Experiment) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut exact = true;
    for i in 0..20 {
        let s = [2, 4, 8][i % 3];
        let grid = GridSpec::new(s * rng.random_range(2..=5), s * rng.random_range(2..=5), s).unwrap();
        // one-hot maps, the first few being the plain grid
        let scores = Tensor::from_fn(&[grid.height, grid.width, NEIGHBORS], |_| rng.random::<f64>());
        let hard_labels = hard_assign(&AssociationMap::from_scores(scores, grid).unwrap());
        let onehot = if i < 3 {
            AssociationMap::owning(grid)
        } else {
            let mut probs = Tensor::zeros(&[grid.height, grid.width, NEIGHBORS]);
            for y in 0..grid.height {
                for x in 0..grid.width {
                    let cell = hard_labels.get(x, y) as usize;
                    let k = (0..NEIGHBORS).find(|&k| grid.neighbor(x, y, k) == Some(cell)).unwrap();
                    probs.set(&[y, x, k], 1.0);
                }
            }
            AssociationMap::new(probs, grid).unwrap()
        };
        let labels = hard_assign(&onehot);
        let c = rng.random_range(1..=3);
        let values: Vec<f64> = (0..grid.n_cells() * c).map(|_| rng.random_range(-64..64) as f64 * 0.25).collect();
        let volume = Tensor::from_fn(&[grid.height, grid.width, c], |i| values[labels.get(i[1], i[0]) as usize * c + i[2]]);
        let back = upsample(&onehot, &downsample(&onehot, &volume).unwrap()).unwrap();
        exact &= back == volume;
    }
    let scenes = corpus::<f32>(CORPUS_SEED + 1, 50, &MosaicConfig::default()).unwrap();
    let mut wins = 0;
    for s in &scenes {
        let q = exp.net.predict(&s.image, CELL).unwrap();
        let (ours, bilinear) = compare_upsamplers(&q, &s.disparity, &s.labels).unwrap();
        wins += usize::from(ours < bilinear);
    }
    outcome(
        exact && wins >= 45,
        format!("hard round trips exact: {exact}; superpixel upsampling wins {wins} of 50 at {CELL}x"),
    )
}

fn gridpix(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gridpix")).args(args).current_dir(dir).output().unwrap()
}

fn cli_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let scenes = corpus::<f32>(CORPUS_SEED + 2, 6, &MosaicConfig::default()).unwrap();
    write_corpus(&dir.join("data"), "scene", &scenes).unwrap();
    std::fs::create_dir_all(dir.join("pred")).unwrap();
    std::fs::create_dir_all(dir.join("gt")).unwrap();
    let steps: Vec<Vec<String>> = {
        let mut v = vec![
            "train --data data/manifest.txt --loss sem --m 0.003 --cell-size 8 --iters 200 --seed 3 --batch-size 2 --out net.ckpt"
                .split(' ')
                .map(String::from)
                .collect::<Vec<_>>(),
        ];
        for i in 0..3 {
            v.push(
                format!("infer --ckpt net.ckpt --image data/scene_{i:04}.ppm --nsp 64 --out pred/scene_{i:04}.pgm --overlay overlay_{i}.ppm")
                    .split(' ')
                    .map(String::from)
                    .collect(),
            );
            std::fs::copy(dir.join(format!("data/scene_{i:04}.pgm")), dir.join(format!("gt/scene_{i:04}.pgm"))).unwrap();
        }
        v.push("eval --pred pred --gt gt --out eval.csv".split(' ').map(String::from).collect());
        v
    };
    for step in &steps {
        let args: Vec<&str> = step.iter().map(String::as_str).collect();
        let out = gridpix(&args, dir);
        assert!(out.status.success(), "{step:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files = Vec::new();
    for name in ["net.ckpt", "net.csv", "eval.csv", "overlay_0.ppm", "overlay_1.ppm", "overlay_2.ppm"] {
        files.push((name.to_string(), std::fs::read(dir.join(name)).unwrap()));
    }
    for i in 0..3 {
        let name = format!("pred/scene_{i:04}.pgm");
        files.push((name.clone(), std::fs::read(dir.join(&name)).unwrap()));
    }
    files
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_run(a.path());
    let second = cli_run(b.path());
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts byte-identical across two runs", first.len())
        } else {
            format!("differing artifacts: {}", differing.join(", "))
        },
    )
}

fn main() {
    // libtest flags such as --nocapture or test filters are accepted and ignored
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("{} criterion {n} ({name}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "csp equivalence", csp_equivalence());
    let exp = train_network();
    report(3, "association invariants", association_invariants(&exp.net, &exp.held_out));
    report(4, "connectivity", connectivity());
    report(5, "metric oracles", metric_oracles());
    let (learning, net_asa) = desk_learning(&exp);
    report(6, "desk-scale learning", learning);
    report(7, "slic baseline", slic_sanity(&exp, net_asa));
    report(8, "sampling round trip", sampling_round_trip(&exp));
    report(9, "determinism", determinism());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
