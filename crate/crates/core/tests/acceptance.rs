//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hycone::cones::{exterior_angle, half_aperture};
use hycone::data::{generate_synthetic, Dataset, SynthSpec, SyntheticWorld};
use hycone::geo::{interpolate, root_point, traverse, PathOptions};
use hycone::hiereval::metrics::{lca_error_ids, set_metrics_ids, tie_ids, AncestorConvention};
use hycone::hiereval::{accuracy, ClassPrototypes, TaxonomyGraph};
use hycone::losses::LossTerm;
use hycone::manifold::{exp_map, geodesic_distance, log_map, lorentz_inner, Curvature, HyperPoint, TangentVector};
use hycone::trainer::gradcheck::{grad_check, GradCheckConfig};
use hycone::trainer::{train_run, KappaMode, Modality, ModelState, RunOptions, RunOutput, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn lorentz_residual(p: &HyperPoint<f64>) -> f64 {
    let a = p.ambient();
    (p.curvature().kappa() * lorentz_inner(&a, &a).unwrap() + 1.0).abs()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_manifold = 0.0f64;
    let mut worst_roundtrip = 0.0f64;
    let mut worst_slack = f64::INFINITY;
    let mut max_radius = 0.0f64;
    for _ in 0..10_000 {
        let dim = rng.random_range(2..=8);
        let kappa = Curvature::new(rng.random_range(0.1..10.0)).unwrap();
        let s = kappa.sqrt_kappa();
        // coordinates of order one in units of the curvature radius 1/√κ
        let base = HyperPoint::new(gaussian(&mut rng, dim, 0.5 / s), kappa);
        // tangent vector at base: w + κ⟨base, w⟩ base
        let pa = base.ambient();
        let mut w = vec![0.0];
        w.extend(gaussian(&mut rng, dim, 0.5 / s));
        let c = kappa.kappa() * lorentz_inner(&pa, &w).unwrap();
        let comps: Vec<f64> = w.iter().zip(&pa).map(|(&wi, &pi)| wi + c * pi).collect();
        let v = TangentVector::at(base.clone(), comps).unwrap();
        let q = exp_map(&base, &v).unwrap();
        worst_manifold = worst_manifold.max(lorentz_residual(&q));
        max_radius = max_radius.max(s * q.spatial_norm());
        let back = log_map(&base, &q).unwrap();
        let vn = v.lorentz_norm();
        let err = back
            .components()
            .iter()
            .zip(v.components())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst_roundtrip = worst_roundtrip.max(err / (1.0 + vn));
    }
    for _ in 0..10_000 {
        let dim = rng.random_range(2..=8);
        let kappa = Curvature::new(rng.random_range(0.1..10.0)).unwrap();
        let sd = 1.5 / kappa.sqrt_kappa();
        let [a, b, c] = [0, 1, 2].map(|_| HyperPoint::new(gaussian(&mut rng, dim, sd), kappa));
        let d = |x: &HyperPoint<f64>, y: &HyperPoint<f64>| geodesic_distance(x, y).unwrap();
        worst_slack = worst_slack.min(d(&a, &b) + d(&b, &c) - d(&a, &c));
    }
    let elapsed = start.elapsed();
    let pass = worst_manifold <= 1e-6 && worst_roundtrip <= 1e-6 && worst_slack >= -1e-7 && elapsed < Duration::from_secs(5);
    outcome(
        pass,
        format!(
            "max |κ<p,p>+1| = {worst_manifold:.2e} (max √κ‖p̃‖ = {max_radius:.2}), \
             max roundtrip err/(1+|v|) = {worst_roundtrip:.2e}, min triangle slack = {worst_slack:.2e}, {elapsed:.2?}"
        ),
    )
}

fn criterion_2() -> Outcome {
    let unit = Curvature::new(1.0).unwrap();
    let w1 = half_aperture(&HyperPoint::new(vec![0.2, 0.0], unit), 0.1);
    let w2 = half_aperture(&HyperPoint::new(vec![0.0, 0.4], unit), 0.1);
    let e1 = (w1 - FRAC_PI_2).abs();
    let e2 = (w2 - FRAC_PI_6).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(2..=8);
        let kappa = Curvature::new(rng.random_range(0.1..10.0)).unwrap();
        let dir = gaussian(&mut rng, dim, 1.0);
        let n = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let r = rng.random_range(0.05..4.0) / kappa.sqrt_kappa();
        let extra = rng.random_range(0.01..3.0) / kappa.sqrt_kappa();
        let q = HyperPoint::new(dir.iter().map(|x| x / n * r).collect(), kappa);
        let p = HyperPoint::new(dir.iter().map(|x| x / n * (r + extra)).collect(), kappa);
        worst = worst.max(exterior_angle(&p, &q).unwrap().abs());
    }
    outcome(
        e1 <= 1e-9 && e2 <= 1e-9 && worst <= 1e-7,
        format!("|ω(0.2)−π/2| = {e1:.1e}, |ω(0.4)−π/6| = {e2:.1e}, max collinear φ = {worst:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig {
        dim: 8,
        batch: 4,
        h: 1e-4,
        ..GradCheckConfig::default()
    };
    let r = grad_check(&cfg).unwrap();
    let elapsed = start.elapsed();
    outcome(
        r.max_rel_err < 1e-3 && r.checked > 0 && elapsed < Duration::from_secs(30),
        format!(
            "{} coordinates checked, {} excluded at kinks, max relative error {:.2e} ({}), {elapsed:.2?}",
            r.checked, r.excluded, r.max_rel_err, r.worst
        ),
    )
}

/// Random tree on `n` nodes with integer edge weights.
fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> (TaxonomyGraph, Vec<Option<(usize, u64)>>) {
    let mut parent = vec![None];
    let mut edges = Vec::new();
    for i in 1..n {
        let p = rng.random_range(0..i);
        let w = rng.random_range(1..=4u64);
        parent.push(Some((p, w)));
        edges.push((format!("n{p}"), format!("n{i}"), w as f64));
    }
    (TaxonomyGraph::from_edges("n0", &edges).unwrap(), parent)
}

/// Weighted path length by breadth-first search over the undirected tree.
fn bfs_distance(parent: &[Option<(usize, u64)>], a: usize, b: usize) -> u64 {
    let n = parent.len();
    let mut adj = vec![Vec::new(); n];
    for (c, p) in parent.iter().enumerate() {
        if let Some((p, w)) = *p {
            adj[p].push((c, w));
            adj[c].push((p, w));
        }
    }
    let mut dist = vec![None; n];
    dist[a] = Some(0u64);
    let mut queue = VecDeque::from([a]);
    while let Some(u) = queue.pop_front() {
        for &(v, w) in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(dist[u].unwrap() + w);
                queue.push_back(v);
            }
        }
    }
    dist[b].unwrap()
}

fn ancestors(parent: &[Option<(usize, u64)>], mut u: usize) -> Vec<usize> {
    let mut out = vec![u];
    while let Some((p, _)) = parent[u] {
        out.push(p);
        u = p;
    }
    out
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut mismatches = 0;
    let mut checked = 0;
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let (g, parent) = random_tree(&mut rng, n);
        let id = |i: usize| g.id(&format!("n{i}")).unwrap();
        let wdepth = |u: usize| bfs_distance(&parent, 0, u);
        for _ in 0..100 {
            let (p, t) = (rng.random_range(0..n), rng.random_range(0..n));
            let ap = ancestors(&parent, p);
            let at = ancestors(&parent, t);
            let lca = *at.iter().find(|u| ap.contains(u)).unwrap();
            let tie = bfs_distance(&parent, p, t);
            let lca_err = wdepth(t) - wdepth(lca);
            // ancestor sets: the node itself, without the root
            let sp: BTreeSet<usize> = ap.into_iter().filter(|&u| u != 0).collect();
            let st: BTreeSet<usize> = at.into_iter().filter(|&u| u != 0).collect();
            let inter = sp.intersection(&st).count() as u64;
            let union = sp.union(&st).count() as u64;
            let ratio = |num: u64, den: u64| if den == 0 { Ratio::from_integer(0) } else { Ratio::new(num, den) };
            let (j, ph, rh) = if union == 0 {
                (Ratio::from_integer(1), Ratio::from_integer(1), Ratio::from_integer(1))
            } else {
                (ratio(inter, union), ratio(inter, sp.len() as u64), ratio(inter, st.len() as u64))
            };
            let s = set_metrics_ids(&g, id(p), id(t), AncestorConvention::default());
            let ok = tie_ids(&g, id(p), id(t)) == tie as f64
                && lca_error_ids(&g, id(p), id(t)) == lca_err as f64
                && (s.jaccard, s.p_h, s.r_h) == (j, ph, rh);
            mismatches += usize::from(!ok);
            checked += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{checked} label pairs on 50 random trees, {mismatches} mismatches"),
    )
}

fn default_run_config() -> TrainConfig {
    TrainConfig {
        batch_size: 64,
        total_steps: 2000,
        gamma: 0.1,
        eta_inter: 0.7,
        eta_intra: 1.2,
        k: 0.1,
        kappa: KappaMode::Learnable { init: 1.0 },
        ..TrainConfig::default()
    }
}

struct World {
    data: Dataset<f64>,
    taxonomy: TaxonomyGraph,
    world: SyntheticWorld,
}

fn world() -> World {
    let spec = SynthSpec {
        depth: 3,
        branching: 4,
        feature_dim: 32,
        samples_per_leaf: 64,
        ..SynthSpec::default()
    };
    let (data, taxonomy, world) = generate_synthetic(&spec).unwrap();
    assert_eq!((taxonomy.leaves().len(), data.len()), (64, 4096));
    World { data, taxonomy, world }
}

fn converged(out: &RunOutput<f64>) -> (bool, f64, f64) {
    let first = out.metrics.first().unwrap().total;
    let last = out.metrics.last().unwrap().total;
    (last < 0.25 * first, first, last)
}

/// Eight leaves, two from each top-level subtree.
fn zero_shot_accuracy(w: &World, state: &ModelState<f64>) -> f64 {
    let leaves: Vec<String> = (0..4).flat_map(|i| [format!("c{i}.0.0"), format!("c{i}.2.1")]).collect();
    let prompts: Vec<Vec<Vec<f64>>> = leaves
        .iter()
        .map(|l| {
            w.data
                .items
                .iter()
                .filter(|q| q.class_id.as_deref() == Some(l))
                .map(|q| q.text.clone())
                .collect()
        })
        .collect();
    let protos = ClassPrototypes::new(state, &prompts).unwrap();
    let held = w.world.held_out(16);
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for q in &held.items {
        if let Some(c) = leaves.iter().position(|l| Some(l.as_str()) == q.class_id.as_deref()) {
            images.push(q.image.clone());
            labels.push(c);
        }
    }
    let pred = protos.classify_batch(state, &images).unwrap();
    accuracy(&pred, &labels).unwrap()
}

fn criterion_5(w: &World, run: &RunOutput<f64>, elapsed: Duration) -> Outcome {
    let (a, first, last) = converged(run);
    let f = run.metrics.last().unwrap();
    let b = f.radius_txt_box < f.radius_txt && f.radius_txt < f.radius_img;
    let acc = zero_shot_accuracy(w, &run.state);
    let rerun = train_run::<f64>(&default_run_config(), &w.data, &RunOptions::default()).unwrap();
    let bits = |o: &RunOutput<f64>| o.steps.iter().map(|s| s.total.to_bits()).collect::<Vec<_>>();
    let d = rerun.state == run.state && bits(&rerun) == bits(run);
    let pass = a && b && acc > 0.9 && d && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "(a) loss {first:.4} -> {last:.4} ({:.1}%) {}; (b) radii txt_box {:.4} < txt {:.4} < img {:.4} {}; \
             (c) zero-shot accuracy {acc:.4}; (d) identical rerun {d}; {elapsed:.2?}",
            100.0 * last / first,
            ok(a),
            f.radius_txt_box,
            f.radius_txt,
            f.radius_img,
            ok(b),
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

fn criterion_6(w: &World) -> Outcome {
    let short = TrainConfig {
        total_steps: 40,
        warmup_steps: 10,
        eval_every: 10,
        ..default_run_config()
    };
    let full = train_run::<f64>(&short, &w.data, &RunOptions::default()).unwrap();
    let stream = |o: &RunOutput<f64>| o.steps.iter().map(|s| s.total).collect::<Vec<_>>();
    let mut dead = Vec::new();
    for term in LossTerm::ALL {
        let cfg = TrainConfig {
            ablate: vec![term],
            ..short.clone()
        };
        let out = train_run::<f64>(&cfg, &w.data, &RunOptions::default()).unwrap();
        // the term must change both the objective and the trajectory
        if stream(&out) == stream(&full) || out.state.image == full.state.image {
            dead.push(term.to_string());
        }
    }
    outcome(
        dead.is_empty(),
        format!("8 ablations over 40 steps, terms without effect: {dead:?}"),
    )
}

fn criterion_7(w: &World, state: &ModelState<f64>) -> Outcome {
    let held = w.world.held_out(1);
    let images: Vec<Vec<f64>> = held.items.iter().map(|q| q.image.clone()).collect();
    let sources = state.embed(Modality::Image, &images).unwrap();
    let root = root_point(sources[0].dim(), state.curvature());
    let mut worst_manifold = 0.0f64;
    let mut monotone = true;
    for (i, s) in sources.iter().enumerate() {
        let to_root = interpolate(s, &root, 50, true).unwrap();
        monotone &= to_root.windows(2).all(|p| p[1].spatial_norm() < p[0].spatial_norm());
        let other = &sources[(i + 1) % sources.len()];
        for p in to_root.iter().chain(&interpolate(s, other, 50, true).unwrap()) {
            worst_manifold = worst_manifold.max(lorentz_residual(p));
        }
    }
    // gallery: every caption and box phrase, labelled with its concept depth
    let mut feats = Vec::new();
    let mut depth = Vec::new();
    let depth_of = |label: &str| w.taxonomy.depth(w.taxonomy.id(label).unwrap());
    for q in &w.data.items {
        feats.push(q.text.clone());
        depth.push(depth_of(q.class_id.as_deref().unwrap()));
        for (t, c) in q.text_boxes.iter().zip(q.box_concepts.as_ref().unwrap()) {
            feats.push(t.clone());
            depth.push(depth_of(c));
        }
    }
    let gallery: Vec<(u64, HyperPoint<f64>)> = state
        .embed(Modality::Text, &feats)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, e)| (i as u64, e))
        .collect();
    let (mut good, mut total) = (0usize, 0usize);
    for s in &sources {
        let steps = traverse(s, &root, &gallery, 50, PathOptions::default()).unwrap();
        for pair in steps.windows(2) {
            total += 1;
            good += usize::from(depth[pair[1].item_id as usize] <= depth[pair[0].item_id as usize]);
        }
    }
    let frac = good as f64 / total.max(1) as f64;
    outcome(
        worst_manifold <= 1e-8 && monotone && total > 0 && frac >= 0.9,
        format!(
            "max |κ<p,p>+1| = {worst_manifold:.2e}, radial contraction {}, \
             non-increasing depth in {good}/{total} adjacent retrievals ({:.1}%)",
            ok(monotone),
            100.0 * frac
        ),
    )
}

fn criterion_8(w: &World, learnable: &RunOutput<f64>) -> Outcome {
    let mut results = HashMap::new();
    let mut all = true;
    for k in [0.1, 0.3, 0.6, 1.0] {
        let cfg = TrainConfig {
            kappa: KappaMode::Fixed(k),
            ..default_run_config()
        };
        let out = train_run::<f64>(&cfg, &w.data, &RunOptions::default()).unwrap();
        let (c, first, last) = converged(&out);
        all &= c && (out.state.scalars.kappa() - k).abs() <= 1e-12 * k;
        results.insert(format!("fixed:{k}"), format!("{:.1}%", 100.0 * last / first));
    }
    let (c, first, last) = converged(learnable);
    all &= c;
    results.insert("learnable".into(), format!("{:.1}%", 100.0 * last / first));
    let mut keys: Vec<_> = results.into_iter().collect();
    keys.sort();
    outcome(all, format!("final/initial loss {keys:?}"))
}

#[test]
fn acceptance() {
    let mut lines: Vec<(u32, Outcome)> = vec![(1, criterion_1()), (2, criterion_2()), (3, criterion_3()), (4, criterion_4())];
    let w = world();
    let start = Instant::now();
    let run = train_run::<f64>(&default_run_config(), &w.data, &RunOptions::default()).unwrap();
    let elapsed = start.elapsed();
    lines.push((5, criterion_5(&w, &run, elapsed)));
    lines.push((6, criterion_6(&w)));
    lines.push((7, criterion_7(&w, &run.state)));
    lines.push((8, criterion_8(&w, &run)));
    for (n, o) in &lines {
        println!("criterion {n}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<u32> = lines.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
