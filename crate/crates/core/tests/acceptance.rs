//! Acceptance suite. Every criterion runs in sequence and prints one
//! PASS/FAIL line; the process exits nonzero if any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 3 7`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use invrise_core::classifier::{gradient_check, Architecture, BlackBox, BridgeClient, BridgeOptions, Confidence, ConvScorer, Embedding, TrainConfig};
use invrise_core::dataset::{generate_backgrounds, generate_dataset, split_dataset, Dataset, DatasetConfig, Label};
use invrise_core::harness::{self, EventLog, ExperimentConfig};
use invrise_core::imaging::{BinaryMask, Image, LowResGrid};
use invrise_core::interaction::{
    initial_classifier, oracle_feedback, run, Feedback, FeedbackProvider, FeedbackSource, LoopConfig, LoopData,
    LoopState, OracleFeedback, QueryView, RunOutcome, Strategy, TrainItem,
};
use invrise_core::metrics::{self, ConfusionMatrix};
use invrise_core::neighbors::{self, Codebook, CodebookEntry, Query};
use invrise_core::saliency::{self, MaskConfig, MaskSet, SaliencyMap};
use invrise_core::Error;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("{what} took {took:.1?}, limit {limit:?}"))
}

fn err(e: Error) -> String {
    e.to_string()
}

/// A deterministic black box given by a plain function of the pixels.
struct FnBox<F>(F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> BlackBox for FnBox<F> {
    fn predict(&self, image: &Image) -> invrise_core::Result<Confidence> {
        Confidence::new((self.0)(image.pixels()))
    }

    fn embed(&self, image: &Image) -> invrise_core::Result<Embedding> {
        Ok(Embedding(vec![image.pixels().iter().sum()]))
    }

    fn embedding_len(&self) -> usize {
        1
    }
}

// ---------------------------------------------------------------------------
// 1. brute-force equivalence

/// Bilinear upsampling with cell centers at the centers of an l x l tiling,
/// border cells extended to the edge.
fn oracle_upsample(cells: &[u8], l: usize, side: usize) -> Vec<f64> {
    let coord = |x: usize| {
        let u = ((x as f64 + 0.5) * l as f64 / side as f64 - 0.5).clamp(0.0, (l - 1) as f64);
        let i0 = (u.floor() as usize).min(l - 1);
        let i1 = (i0 + 1).min(l - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let (r0, r1, ty) = coord(y);
        for x in 0..side {
            let (c0, c1, tx) = coord(x);
            let g = |c: usize, r: usize| f64::from(cells[r * l + c]);
            let top = g(c0, r0) * (1.0 - tx) + g(c1, r0) * tx;
            let bottom = g(c0, r1) * (1.0 - tx) + g(c1, r1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn logistic_score(pixels: &[f64]) -> f64 {
    let z: f64 = pixels
        .iter()
        .enumerate()
        .map(|(i, v)| v * ((i as f64 * 0.7).sin() * 2.0 + 0.3))
        .sum::<f64>()
        + 0.25 * pixels[5] * pixels[10]
        - 0.4;
    1.0 / (1.0 + (-z).exp())
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let (side, l) = (4, 2);
    let image = Image::from_fn(side, 1, |x, y, _| ((x * 7 + y * 3) % 5) as f64 / 4.0);
    let model = FnBox(logistic_score);
    let masks = MaskSet::exhaustive(l, side).map_err(err)?;
    ensure(masks.k() == 16, || format!("exhaustive set has {} grids", masks.k()))?;

    let mut occluded_sum = vec![0.0; side * side];
    let mut occluded_count = vec![0.0; side * side];
    let mut visible_sum = vec![0.0; side * side];
    let mut visible_mass = vec![0.0; side * side];
    for bits in 0u32..16 {
        let cells: Vec<u8> = (0..4).map(|i| ((bits >> i) & 1) as u8).collect();
        let m = oracle_upsample(&cells, l, side);
        let masked: Vec<f64> = image.pixels().iter().zip(&m).map(|(a, b)| a * b).collect();
        let f = logistic_score(&masked);
        for i in 0..side * side {
            if m[i] == 0.0 {
                occluded_sum[i] += 1.0 - f;
                occluded_count[i] += 1.0;
            }
            visible_sum[i] += f * m[i];
            visible_mass[i] += m[i];
        }
    }
    let inv = saliency::invrise(&image, &model, &masks, Label::Nok).map_err(err)?;
    let rise = saliency::rise(&image, &model, &masks, Label::Nok).map_err(err)?;
    let mut worst: f64 = 0.0;
    for i in 0..side * side {
        ensure(occluded_count[i] > 0.0, || format!("pixel {i} never occluded"))?;
        worst = worst.max((inv.values()[i] - occluded_sum[i] / occluded_count[i]).abs());
        worst = worst.max((rise.values()[i] - visible_sum[i] / visible_mass[i]).abs());
    }
    ensure(worst < 1e-12, || format!("max abs error {worst:e}"))?;
    within(started, Duration::from_secs(1), "brute-force check")?;
    Ok(format!("max abs error {worst:.2e} over 16 grids, {:.1?}", started.elapsed()))
}

// ---------------------------------------------------------------------------
// 2. constant classifier

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let masks = MaskSet::sample(&MaskConfig::default(), 64).map_err(err)?;
    ensure(masks.k() == 1000 && masks.l() == 8 && masks.p() == 0.5, || "unexpected defaults".into())?;
    let image = Image::from_fn(64, 1, |x, y, _| ((x ^ y) % 7) as f64 / 6.0);
    let mut worst: f64 = 0.0;
    for c in [0.0, 0.25, 0.5, 1.0] {
        let model = FnBox(move |_: &[f64]| c);
        let inv = saliency::invrise(&image, &model, &masks, Label::Nok).map_err(err)?;
        let rise = saliency::rise(&image, &model, &masks, Label::Nok).map_err(err)?;
        for (map, expected) in [(&inv, 1.0 - c), (&rise, c)] {
            let undefined: HashSet<usize> = map.undefined_pixels().iter().copied().collect();
            for (i, v) in map.values().iter().enumerate() {
                if !undefined.contains(&i) {
                    worst = worst.max((v - expected).abs());
                }
            }
        }
    }
    ensure(worst < 1e-9, || format!("max deviation {worst:e}"))?;
    within(started, Duration::from_secs(10), "constant-classifier check")?;
    Ok(format!("max deviation {worst:.2e} for c in {{0, 0.25, 0.5, 1}}, {:.1?}", started.elapsed()))
}

// ---------------------------------------------------------------------------
// 3. occlusion statistics

/// Smallest count `a` with `P[X <= a] > alpha / 2` for X ~ Bin(n, 1/2);
/// the two-sided acceptance region is `[a, n - a]`.
fn binomial_half_lower(n: u64, alpha: f64) -> u64 {
    // ln P[X = a], advanced by the ratio C(n, a+1) / C(n, a)
    let mut ln_pmf = -(n as f64) * 2f64.ln();
    let mut tail = 0.0;
    for a in 0..n / 2 {
        let next = tail + ln_pmf.exp();
        if next > alpha / 2.0 {
            return a;
        }
        tail = next;
        ln_pmf += ((n - a) as f64).ln() - ((a + 1) as f64).ln();
    }
    n / 2
}

fn criterion_3() -> Outcome {
    // side 56 puts each of the 8 x 8 cell centers exactly on a pixel
    let side = 56;
    let config = MaskConfig {
        k: 10_000,
        ..MaskConfig::default()
    };
    let masks = MaskSet::sample(&config, side).map_err(err)?;
    let n = masks.k() as u64;
    let lo = binomial_half_lower(n, 0.01);
    let hi = n - lo;
    let mut worst = 0.0f64;
    let mut outside = Vec::new();
    for cy in 0..8 {
        for cx in 0..8 {
            let (x, y) = (3 + 7 * cx, 3 + 7 * cy);
            let i = y * side + x;
            let hidden = masks.masks().iter().filter(|m| m.values()[i] == 0.0).count() as u64;
            let from_grids = masks.grids().iter().filter(|g| g.get(cx, cy) == 0).count() as u64;
            ensure(hidden == from_grids, || format!("center ({x},{y}): {hidden} hidden but {from_grids} zero cells"))?;
            let reported = masks.occlusion_probability(x, y).map_err(err)?;
            ensure(reported == hidden as f64 / n as f64, || format!("center ({x},{y}) reports {reported}"))?;
            if !(lo..=hi).contains(&hidden) {
                outside.push(format!("({x},{y}) hidden {hidden}"));
            }
            worst = worst.max((hidden as f64 / n as f64 - 0.5).abs());
        }
    }
    let ones = MaskSet::from_grids(vec![LowResGrid::filled(8, 1); 16], 64, false).map_err(err)?;
    let image = Image::filled(64, 1, 0.5);
    let model = FnBox(|_: &[f64]| 0.3);
    let map = saliency::invrise(&image, &model, &ones, Label::Nok).map_err(err)?;
    ensure(map.undefined_pixels().len() == 64 * 64, || {
        format!("{} undefined pixels with an all-ones set", map.undefined_pixels().len())
    })?;
    ensure(map.values().iter().all(|v| *v == 0.0), || "undefined pixels are not reported as 0".into())?;
    if !outside.is_empty() {
        // reported alongside: the same check with a family-wise 99% level
        let fw = binomial_half_lower(n, 0.01 / 64.0);
        let fw_ok = worst <= (n / 2 - fw) as f64 / n as f64;
        return Err(format!(
            "{} of 64 centers outside [{lo}, {hi}] of {n}: {}; largest |freq - 0.5| = {worst:.4}, {} the Bonferroni region [{fw}, {}]",
            outside.len(),
            outside.join(", "),
            if fw_ok { "inside" } else { "outside" },
            n - fw
        ));
    }

    Ok(format!(
        "64 centers inside [{lo}, {hi}] of {n}, largest |freq - 0.5| = {worst:.4}; all-ones set leaves every pixel undefined"
    ))
}

// ---------------------------------------------------------------------------
// 4. localization

fn criterion_4() -> Outcome {
    let started = Instant::now();
    let side = 4;
    let masks = MaskSet::exhaustive(4, side).map_err(err)?;
    let image = Image::filled(side, 1, 1.0);
    for planted in 0..side * side {
        let model = FnBox(move |px: &[f64]| px[planted]);
        for method in saliency::SaliencyMethod::ALL {
            let map = saliency::explain(method, &image, &model, &masks, Label::Nok).map_err(err)?;
            ensure(map.argmax() == planted, || format!("{method} argmax {} for planted pixel {planted}", map.argmax()))?;
        }
    }

    let scorer = localization_scorer()?;
    let explained = generate_dataset(&DatasetConfig {
        ok: 0,
        no_seam: 40,
        nok: 60,
        side: 64,
        channels: 1,
        seed: 2,
    });
    let masks = MaskSet::sample(&MaskConfig::default(), 64).map_err(err)?;
    let mut hits = 0;
    let mut by_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for inst in &explained {
        let map = saliency::invrise(&inst.image, &scorer, &masks, Label::Nok).map_err(err)?;
        let expert = inst.defect_mask.as_ref().ok_or("NOK instance without mask")?;
        let hit = expert.values()[map.argmax()];
        hits += usize::from(hit);
        let kind = inst.defect_kind.map(|k| format!("{k:?}")).unwrap_or_default();
        let e = by_kind.entry(kind).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
    }
    let breakdown = by_kind
        .iter()
        .map(|(k, (h, n))| format!("{k} {h}/{n}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(hits >= 95, || {
        format!("single-pixel detector ok; trained scorer InvRISE hits {hits}/100 (need 95): {breakdown}")
    })?;
    within(started, Duration::from_secs(600), "localization")?;
    Ok(format!("detector argmax exact on 16 positions; trained scorer hits {hits}/100 ({breakdown})"))
}

/// The desk scorer: 32-pixel input, trained to convergence on a generated set.
fn localization_scorer() -> Result<ConvScorer, String> {
    let instances = generate_dataset(&DatasetConfig {
        seed: 1,
        ..DatasetConfig::default()
    });
    let splits = split_dataset(&instances, [0.6, 0.15, 0.25, 0.0], 1).map_err(err)?;
    let ds = Dataset::new(instances).map_err(err)?;
    let pairs = |ids: &[String]| -> Result<Vec<(&Image, Label)>, String> {
        Ok(ds.select(ids).map_err(err)?.into_iter().map(|i| (&i.image, i.label)).collect())
    };
    let train = pairs(&splits.train)?;
    let validation = pairs(&splits.validation)?;
    let mut scorer = ConvScorer::new(
        Architecture {
            input_side: 32,
            ..Architecture::default()
        },
        3,
    )
    .map_err(err)?;
    scorer
        .train(
            &train,
            &validation,
            &TrainConfig {
                learning_rate: 0.05,
                max_epochs: 60,
                patience: 60,
                ..TrainConfig::default()
            },
        )
        .map_err(err)?;
    Ok(scorer)
}

// ---------------------------------------------------------------------------
// 5. metrics

fn random_mask(r: &mut ChaCha8Rng, side: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(side, |_, _| r.random_bool(density))
}

fn criterion_5() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for n in 0..50 {
        let side = r.random_range(1..12);
        // every tenth fixture pairs two empty masks
        let (da, db) = if n % 10 == 0 { (0.0, 0.0) } else { (r.random_range(0.0..1.0), r.random_range(0.0..1.0)) };
        let a = random_mask(&mut r, side, da);
        let b = random_mask(&mut r, side, db);
        let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
        for y in 0..side {
            for x in 0..side {
                let (pa, pb) = (a.get(x, y), b.get(x, y));
                na += usize::from(pa);
                nb += usize::from(pb);
                inter += usize::from(pa && pb);
            }
        }
        let union = na + nb - inter;
        let want_dice = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let want_jac = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let d = metrics::dice(&a, &b).map_err(err)?;
        let j = metrics::jaccard(&a, &b).map_err(err)?;
        ensure(d == want_dice, || format!("fixture {n}: dice {d} vs {want_dice}"))?;
        ensure(j == want_jac, || format!("fixture {n}: jaccard {j} vs {want_jac}"))?;
        ensure(j <= d, || format!("fixture {n}: jaccard {j} > dice {d}"))?;
        ensure((d - 2.0 * j / (1.0 + j)).abs() < 1e-12, || format!("fixture {n}: dice {d} != 2j/(1+j) for j {j}"))?;
    }

    for n in 0..50 {
        let side = r.random_range(1..10);
        // few distinct values so that ties are common
        let values: Vec<f64> = (0..side * side).map(|_| f64::from(r.random_range(0..4u8))).collect();
        let map = SaliencyMap::from_values(side, values.clone());
        let expert = loop {
            let m = random_mask(&mut r, side, 0.3);
            if !m.is_empty() {
                break m;
            }
        };
        let mut best = 0;
        for i in 1..values.len() {
            if values[i] > values[best] {
                best = i;
            }
        }
        let got = metrics::hit(&map, &expert).map_err(err)?;
        ensure(got == expert.values()[best], || format!("fixture {n}: hit {got}"))?;
        ensure(metrics::hit(&map, &BinaryMask::empty(side)).is_err(), || "hit accepted an empty expert mask".into())?;
    }

    for n in 0..50 {
        let len = r.random_range(1..40);
        let degenerate = n % 5;
        let pairs: Vec<(Label, Label)> = (0..len)
            .map(|_| {
                let pick = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { Label::Nok } else { Label::Ok };
                let truth = if degenerate == 0 { Label::Ok } else { pick(&mut r) };
                let predicted = if degenerate == 1 { Label::Ok } else { pick(&mut r) };
                (truth, predicted)
            })
            .collect();
        let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
        for (t, p) in &pairs {
            match (t, p) {
                (Label::Nok, Label::Nok) => tp += 1.0,
                (Label::Ok, Label::Nok) => fp += 1.0,
                (Label::Ok, Label::Ok) => tn += 1.0,
                (Label::Nok, Label::Ok) => fn_ += 1.0,
            }
        }
        let accuracy = (tp + tn) / len as f64;
        let f1 = if 2.0 * tp + fp + fn_ == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        let mcc = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den.sqrt() };
        let got = metrics::classification_metrics(&ConfusionMatrix::from_pairs(pairs)).map_err(err)?;
        ensure(got.accuracy == accuracy && got.f1 == f1 && got.mcc == mcc, || {
            format!("fixture {n}: got {got:?}, want acc {accuracy} f1 {f1} mcc {mcc}")
        })?;
    }
    ensure(
        metrics::classification_metrics(&ConfusionMatrix::default()).is_err(),
        || "empty confusion matrix accepted".into(),
    )?;
    Ok("150 mask, 50 hit and 50 confusion fixtures match the counting oracles".into())
}

// ---------------------------------------------------------------------------
// 6. retrieval

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Linear scan: best cosine among admissible entries, ties to the smallest id.
fn oracle_pick(entries: &[CodebookEntry], q: &[f64], exclude: Option<&str>, keep: impl Fn(Label) -> bool, maximize: bool) -> Option<String> {
    let mut scored: Vec<(f64, &str)> = entries
        .iter()
        .filter(|e| Some(e.id.as_str()) != exclude && keep(e.label))
        .map(|e| (oracle_cosine(q, e.embedding.as_slice()), e.id.as_str()))
        .collect();
    scored.sort_by(|a, b| {
        let by_score = if maximize { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
        by_score.then(a.1.cmp(b.1))
    });
    scored.first().map(|(_, id)| id.to_string())
}

fn criterion_6() -> Outcome {
    let c = neighbors::cosine(&Embedding(vec![1.0, 0.0]), &Embedding(vec![1.0, 1.0])).map_err(err)?;
    // 0.70710678 is 1/sqrt(2) to eight places
    ensure((c - std::f64::consts::FRAC_1_SQRT_2).abs() <= 1e-9 && format!("{c:.8}") == "0.70710678", || {
        format!("cosine((1,0),(1,1)) = {c}")
    })?;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(600 + seed);
        let size = if seed == 0 { 1000 } else { r.random_range(1..=1000) };
        let dim = r.random_range(2..12);
        let mut entries: Vec<CodebookEntry> = Vec::with_capacity(size);
        for i in 0..size {
            // occasional exact duplicates force tie-breaking
            let embedding = if i > 0 && r.random_bool(0.05) {
                entries[r.random_range(0..i)].embedding.clone()
            } else {
                Embedding((0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
            };
            let label = if r.random_bool(0.4) { Label::Nok } else { Label::Ok };
            entries.push(CodebookEntry {
                id: format!("e{:05}", r.random_range(0..1_000_000u32) * 1000 + i as u32 % 1000),
                embedding,
                label,
            });
        }
        let codebook = Codebook::new(entries.clone(), 0).map_err(err)?;
        for _ in 0..25 {
            let by_id = r.random_bool(0.5);
            let external = Embedding((0..dim).map(|_| r.random_range(-1.0..1.0)).collect());
            let (query, q, exclude) = if by_id {
                let e = &entries[r.random_range(0..size)];
                (Query::Id(&e.id), e.embedding.as_slice(), Some(e.id.as_str()))
            } else {
                (Query::Embedding(&external), external.as_slice(), None)
            };
            for label in [Label::Ok, Label::Nok] {
                let want_hit = oracle_pick(&entries, q, exclude, |l| l == label, true);
                let want_miss = oracle_pick(&entries, q, exclude, |l| l != label, true);
                let want_far = oracle_pick(&entries, q, exclude, |l| l == label, false);
                let got = |res: invrise_core::Result<String>| match res {
                    Ok(id) => Ok(Some(id)),
                    Err(Error::NotFound(_)) => Ok(None),
                    Err(e) => Err(err(e)),
                };
                let hit = got(neighbors::near_hit(&codebook, query, label))?;
                let miss = got(neighbors::near_miss(&codebook, query, label))?;
                let far = got(neighbors::furthest_hit(&codebook, query, label))?;
                ensure(hit == want_hit && miss == want_miss && far == want_far, || {
                    format!("seed {seed}: got {hit:?}/{miss:?}/{far:?}, scan {want_hit:?}/{want_miss:?}/{want_far:?}")
                })?;
                checked += 3;
            }
        }
    }
    Ok(format!("cosine example {c:.10}; {checked} retrievals equal the linear scan over 20 codebooks"))
}

// ---------------------------------------------------------------------------
// 7. gradient check

fn criterion_7() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let scorer = ConvScorer::new(Architecture::default(), seed).map_err(err)?;
        let mut r = ChaCha8Rng::seed_from_u64(700 + seed);
        let image = Image::from_fn(32, 1, |_, _, _| r.random_range(0.0..1.0));
        let label = if seed % 2 == 0 { Label::Nok } else { Label::Ok };
        let e = gradient_check(&scorer, &image, label, 20, seed).map_err(err)?;
        ensure(e < 1e-4, || format!("seed {seed}: relative error {e:e}"))?;
        worst = worst.max(e);
    }
    Ok(format!("max relative error {worst:.2e} over 5 seeds x 20 coordinates"))
}

// ---------------------------------------------------------------------------
// 8. loop structure

fn loop_config(strategy: Strategy, seed: u64) -> LoopConfig {
    LoopConfig {
        strategy,
        interactions_per_iteration: 5,
        iteration_budget: 2,
        masks: MaskConfig {
            k: 40,
            l: 4,
            seed,
            ..MaskConfig::default()
        },
        train: TrainConfig {
            learning_rate: 0.05,
            max_epochs: 3,
            patience: 2,
            ..TrainConfig::default()
        },
        architecture: Architecture {
            input_side: 16,
            ..Architecture::default()
        },
        seed,
        ..LoopConfig::default()
    }
}

fn loop_data(counts: (usize, usize, usize), ratios: [f64; 4], seed: u64) -> Result<Arc<LoopData>, String> {
    let instances = generate_dataset(&DatasetConfig {
        ok: counts.0,
        no_seam: counts.1,
        nok: counts.2,
        side: 16,
        channels: 1,
        seed,
    });
    let splits = split_dataset(&instances, ratios, seed).map_err(err)?;
    let dataset = Dataset::new(instances).map_err(err)?;
    Ok(Arc::new(LoopData::new(dataset, splits, generate_backgrounds(3, 16, 1, seed)).map_err(err)?))
}

fn run_oracle(config: LoopConfig, data: &Arc<LoopData>) -> Result<RunOutcome, String> {
    let initial = initial_classifier(&config, data).map_err(err)?;
    run(config, Arc::clone(data), initial, &mut OracleFeedback).map_err(err)
}

/// Valid but otherwise random feedback.
struct FuzzFeedback(ChaCha8Rng);

impl FeedbackProvider for FuzzFeedback {
    fn feedback(&mut self, view: &QueryView<'_>) -> invrise_core::Result<Feedback> {
        let predicted = view.confidence.label();
        let side = view.instance.image.side();
        for _ in 0..100 {
            let r = &mut self.0;
            let density = r.random_range(0.01..0.3);
            let corrected_mask = r.random_bool(0.5).then(|| random_mask(r, side, density));
            let fb = Feedback {
                prediction_correct: r.random_bool(0.5),
                explanation_correct: r.random_bool(0.5),
                corrected_label: r.random_bool(0.5).then(|| if r.random_bool(0.5) { Label::Ok } else { Label::Nok }),
                corrected_mask,
                source: FeedbackSource::Human,
            };
            if fb.validate(predicted, side).is_ok() {
                return Ok(fb);
            }
        }
        Ok(oracle_feedback(view.instance, view.confidence))
    }
}

fn check_bookkeeping(state: &LoopState, initial: &BTreeSet<String>) -> Result<(), String> {
    state.check_invariants().map_err(err)?;
    let mut training_ids = BTreeSet::new();
    let mut instances = 0;
    for item in state.training() {
        if let TrainItem::Instance { id, .. } = item {
            instances += 1;
            training_ids.insert(id.clone());
        }
    }
    ensure(instances == training_ids.len(), || "an instance is in T twice".into())?;
    let pool = state.pool();
    let holdout: BTreeSet<String> = state.holdout().iter().cloned().collect();
    ensure(training_ids.is_disjoint(pool), || "T and U intersect".into())?;
    ensure(holdout.is_disjoint(pool) && holdout.is_disjoint(&training_ids), || "holdout overlaps T or U".into())?;
    let mut all = training_ids.clone();
    all.extend(pool.iter().cloned());
    all.extend(holdout.iter().cloned());
    ensure(&all == initial && training_ids.len() + pool.len() + holdout.len() == initial.len(), || {
        format!("{} instances accounted for, {} expected", all.len(), initial.len())
    })?;
    let added: usize = state
        .events()
        .iter()
        .flat_map(|e| &e.queries)
        .map(|q| 1 + q.refutations.len())
        .sum();
    let base = state.data().splits.train.len();
    ensure(state.training().len() == base + added, || {
        format!("|T| = {} but {base} + {added} were added", state.training().len())
    })?;
    if let Some(e) = state.events().last() {
        ensure(e.training_size == state.training().len() && e.pool_size == pool.len(), || {
            format!("event {} logs |T| {} |U| {}", e.step, e.training_size, e.pool_size)
        })?;
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let mut compared = 0;
    for seed in 0..3u64 {
        let data = loop_data((30, 10, 20), [0.25, 0.1, 0.2, 0.45], 80 + seed)?;
        let caipi = run_oracle(loop_config(Strategy::Caipi, seed), &data)?;
        let mut no_branch = loop_config(Strategy::NearCaipi, seed);
        no_branch.near_branch = false;
        let ablated = run_oracle(no_branch, &data)?;
        ensure(ablated.events == caipi.events && ablated == caipi, || {
            format!("seed {seed}: branch-disabled NearCAIPI diverges from CAIPI")
        })?;
        let mut zero = loop_config(Strategy::Caipi, seed);
        zero.refutations.count = 0;
        let al = run_oracle(loop_config(Strategy::ActiveLearning, seed), &data)?;
        ensure(run_oracle(zero, &data)? == al, || format!("seed {seed}: CAIPI with 0 refutations diverges from AL"))?;
        compared += caipi.events.len() + al.events.len();
    }

    let data = loop_data((360, 140, 400), [0.1, 0.05, 0.05, 0.8], 88)?;
    let mut config = loop_config(Strategy::NearCaipi, 8);
    config.interactions_per_iteration = 40;
    config.iteration_budget = 1000;
    config.pool_holdout_fraction = 0.05;
    config.train.max_epochs = 2;
    let initial = initial_classifier(&config, &data).map_err(err)?;
    let mut state = LoopState::new(config, Arc::clone(&data), initial).map_err(err)?;
    let everything: BTreeSet<String> = data.splits.train.iter().chain(&data.splits.interactive).cloned().collect();
    let mut provider = FuzzFeedback(ChaCha8Rng::seed_from_u64(808));
    check_bookkeeping(&state, &everything)?;
    while state.steps() < 200 {
        let stop = state.advance(&mut provider).map_err(err)?;
        check_bookkeeping(&state, &everything).map_err(|e| format!("after step {}: {e}", state.steps()))?;
        if let Some(reason) = stop {
            return Err(format!("fuzz run stopped early ({reason:?}) after {} steps", state.steps()));
        }
    }
    let queries: usize = state.events().iter().map(|e| e.queries.len()).sum();
    Ok(format!(
        "ablations identical over {compared} logged steps; 200-step fuzz ({queries} queries, |T| = {}) kept T/U disjoint and conserved",
        state.training().len()
    ))
}

// ---------------------------------------------------------------------------
// 9. strategy comparison

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn criterion_9() -> Outcome {
    let started = Instant::now();
    let config = ExperimentConfig::load(&workspace_root().join("configs/desk.json")).map_err(err)?;
    ensure(config.dataset.total() == 400 && config.dataset.side == 64, || "desk dataset is not 400 x 64x64".into())?;
    ensure(config.interactions_per_iteration == 27 && config.iteration_budget == 7 && config.seeds.len() == 10, || {
        "desk config differs from 27 interactions, budget 7, 10 seeds".into()
    })?;
    let comparison = harness::compare_strategies(&config).map_err(err)?;
    let summaries = comparison.summaries();
    let of = |s: Strategy| summaries.iter().find(|x| x.strategy == s).ok_or(format!("no runs for {s}"));
    let near = of(Strategy::NearCaipi)?;
    let random = of(Strategy::RandomAdd)?;
    let table = summaries
        .iter()
        .map(|s| format!("{} {:.4}->{:.4}", s.strategy, s.initial_accuracy, s.final_accuracy))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(near.final_accuracy >= random.final_accuracy - 0.01, || {
        format!("NearCAIPI {:.4} < RandomAdd {:.4} - 0.01 ({table})", near.final_accuracy, random.final_accuracy)
    })?;
    for s in &summaries {
        ensure(s.final_accuracy >= s.initial_accuracy - 0.02, || {
            format!("{} final {:.4} < initial {:.4} - 0.02 ({table})", s.strategy, s.final_accuracy, s.initial_accuracy)
        })?;
    }
    within(started, Duration::from_secs(20 * 60), "strategy comparison")?;
    Ok(format!("{table}; {:.0?}", started.elapsed()))
}

// ---------------------------------------------------------------------------
// 10. determinism and replay

fn tree(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("inside").to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn criterion_10() -> Outcome {
    let config = ExperimentConfig {
        dataset: DatasetConfig {
            ok: 40,
            no_seam: 30,
            nok: 50,
            side: 32,
            channels: 1,
            seed: 3,
        },
        architecture: Architecture {
            input_side: 16,
            ..Architecture::default()
        },
        train: TrainConfig {
            learning_rate: 0.05,
            max_epochs: 4,
            patience: 2,
            ..TrainConfig::default()
        },
        masks: MaskConfig {
            k: 50,
            ..MaskConfig::default()
        },
        backgrounds: 3,
        interactions_per_iteration: 4,
        iteration_budget: 2,
        seeds: vec![0, 1],
        ..ExperimentConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    harness::compare_strategies(&config).map_err(err)?.write(&a).map_err(err)?;
    harness::compare_strategies(&config).map_err(err)?.write(&b).map_err(err)?;
    let (ta, tb) = (tree(&a)?, tree(&b)?);
    let mut compared = 0;
    for (name, bytes) in &ta {
        // runs.json carries wall-clock times
        if name == "runs.json" {
            continue;
        }
        ensure(tb.get(name) == Some(bytes), || format!("{name} differs between reruns"))?;
        compared += 1;
    }
    ensure(ta.len() == tb.len(), || "reruns wrote different file sets".into())?;
    let mut verified = 0;
    for (name, _) in ta.iter().filter(|(n, _)| n.starts_with("events")) {
        let log = EventLog::load(&a.join(name)).map_err(err)?;
        let report = harness::replay(&log, Some(log.seed)).map_err(|e| format!("{name}: {e}"))?;
        ensure(report.final_metrics == *log.metrics.last().ok_or("empty metrics")?, || format!("{name}: final metrics differ"))?;
        verified += 1;
    }
    ensure(verified == config.seeds.len() * Strategy::ALL.len(), || format!("only {verified} event logs"))?;
    Ok(format!("{compared} output files bit-identical across reruns; {verified} stored runs replayed"))
}

// ---------------------------------------------------------------------------
// 11. bridge

fn criterion_11() -> Outcome {
    let train_set = generate_dataset(&DatasetConfig {
        ok: 40,
        no_seam: 20,
        nok: 40,
        side: 64,
        channels: 1,
        seed: 11,
    });
    let pairs: Vec<(&Image, Label)> = train_set.iter().map(|i| (&i.image, i.label)).collect();
    let mut scorer = ConvScorer::new(Architecture::default(), 11).map_err(err)?;
    scorer
        .train(
            &pairs,
            &pairs[..20],
            &TrainConfig {
                learning_rate: 0.05,
                max_epochs: 40,
                patience: 40,
                ..TrainConfig::default()
            },
        )
        .map_err(err)?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let checkpoint = tmp.path().join("scorer.bin");
    scorer.save(&checkpoint).map_err(err)?;
    let bridge = BridgeClient::spawn(
        Path::new(env!("CARGO_BIN_EXE_invrise-bridge")),
        &["--checkpoint".into(), checkpoint.to_string_lossy().into_owned()],
        BridgeOptions::default(),
    )
    .map_err(err)?;

    let images: Vec<Image> = generate_dataset(&DatasetConfig {
        ok: 40,
        no_seam: 20,
        nok: 40,
        side: 64,
        channels: 1,
        seed: 12,
    })
    .into_iter()
    .map(|i| i.image)
    .collect();
    let local = scorer.predict_batch(&images).map_err(err)?;
    let remote = bridge.predict_batch(&images).map_err(err)?;
    let mut worst_conf: f64 = 0.0;
    for (l, r) in local.iter().zip(&remote) {
        worst_conf = worst_conf.max((l.value() - r.value()).abs());
    }
    let spread = local.iter().map(|c| c.value()).fold(f64::NAN, f64::max) - local.iter().map(|c| c.value()).fold(f64::NAN, f64::min);
    ensure(worst_conf <= 1e-6, || format!("confidences differ by {worst_conf:e}"))?;

    let masks = MaskSet::sample(&MaskConfig::default(), 64).map_err(err)?;
    let mut worst_map: f64 = 0.0;
    for image in images.iter().step_by(25) {
        for method in saliency::SaliencyMethod::ALL {
            let a = saliency::explain(method, image, &scorer, &masks, Label::Nok).map_err(err)?;
            let b = saliency::explain(method, image, &bridge, &masks, Label::Nok).map_err(err)?;
            for (x, y) in a.values().iter().zip(b.values()) {
                worst_map = worst_map.max((x - y).abs());
            }
        }
    }
    ensure(worst_map <= 1e-6, || format!("saliency maps differ by {worst_map:e}"))?;
    Ok(format!(
        "100 confidences within {worst_conf:.1e} (spread {spread:.3}); 8 maps within {worst_map:.1e}"
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(usize, &str, Check); 11] = [
        (1, "brute-force equivalence", criterion_1),
        (2, "constant-classifier identities", criterion_2),
        (3, "occlusion statistics", criterion_3),
        (4, "localization", criterion_4),
        (5, "metrics oracle", criterion_5),
        (6, "neighbor retrieval", criterion_6),
        (7, "gradient check", criterion_7),
        (8, "loop structure", criterion_8),
        (9, "strategy comparison", criterion_9),
        (10, "determinism and replay", criterion_10),
        (11, "bridge transparency", criterion_11),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
