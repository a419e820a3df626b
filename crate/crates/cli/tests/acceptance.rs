//! Acceptance run: nine criteria, one PASS/FAIL line each.
//!
//! Criteria 1-4 exercise the library in process. Criteria 5-9 drive the
//! `fairstamp` binary end to end on the synthetic world and read back its
//! artifacts. Expected values come from oracles written here, never from the
//! code under test.
//!
//! Properties (1-5, 9) gate the exit status. The trend criteria (6-8) measure
//! one fixed seed of a small stochastic experiment; their lines are reported
//! as PASS or FAIL but do not fail the run.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fairstamp::data::{
    gen_synthetic_world, BiasPair, DatasetBundle, KnowledgeTriplet, ParaphrasePair, RetentionItem,
    WorldSpec,
};
use fairstamp::edit::{grad_check, LossWeights, TemplatePrompt};
use fairstamp::metrics::{evaluate, EvalReport};
use fairstamp::model::{train_base, Patch, ProbabilityModel, TrainHyper};
use fairstamp::tracing::{locate_decisive_layer, trace_pair, PositionsMode};
use fairstamp::{FairnessStamp, Model, ModelConfig, Result as FsResult, StampedModel, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// 1. Metric oracle

/// Hand-enumerated probabilities for the 24-item fixture.
const P_STEREO: [f64; 24] = [
    0.62, 0.55, 0.40, 0.71, 0.30, 0.50, 0.81, 0.22, 0.64, 0.47, 0.58, 0.35, 0.90, 0.12, 0.44, 0.66,
    0.51, 0.29, 0.77, 0.38, 0.60, 0.25, 0.53, 0.48,
];
const P_COUNTER: [f64; 24] = [
    0.31, 0.55, 0.52, 0.20, 0.45, 0.49, 0.33, 0.41, 0.60, 0.47, 0.20, 0.50, 0.10, 0.30, 0.21, 0.70,
    0.49, 0.33, 0.11, 0.40, 0.59, 0.26, 0.50, 0.52,
];
const P_PARA_STEREO: [f64; 24] = [
    0.50, 0.40, 0.30, 0.60, 0.20, 0.70, 0.80, 0.10, 0.45, 0.55, 0.35, 0.65, 0.25, 0.75, 0.15, 0.85,
    0.50, 0.52, 0.48, 0.33, 0.67, 0.44, 0.56, 0.60,
];
const P_PARA_COUNTER: [f64; 24] = [
    0.40, 0.50, 0.30, 0.20, 0.60, 0.10, 0.30, 0.20, 0.50, 0.50, 0.40, 0.60, 0.20, 0.70, 0.30, 0.80,
    0.60, 0.51, 0.49, 0.30, 0.70, 0.40, 0.60, 0.50,
];
/// Irrelevant object under the stereotyped and the counterfactual prompt.
const P_IRR_STEREO: [f64; 24] = [
    0.10, 0.60, 0.20, 0.05, 0.30, 0.50, 0.90, 0.10, 0.20, 0.30, 0.10, 0.40, 0.05, 0.20, 0.50, 0.10,
    0.20, 0.30, 0.10, 0.20, 0.10, 0.30, 0.20, 0.10,
];
const P_IRR_COUNTER: [f64; 24] = [
    0.20, 0.10, 0.60, 0.10, 0.50, 0.20, 0.10, 0.50, 0.10, 0.47, 0.10, 0.20, 0.30, 0.10, 0.20, 0.10,
    0.60, 0.20, 0.10, 0.50, 0.30, 0.10, 0.20, 0.20,
];
/// Retention candidates before and after the edit; item 17 flips its argmax
/// and item 5 is a tie that stays a tie.
const RET_BASE: [[f64; 3]; 24] = [
    [0.5, 0.3, 0.2],
    [0.1, 0.7, 0.2],
    [0.2, 0.2, 0.6],
    [0.4, 0.35, 0.25],
    [0.3, 0.6, 0.1],
    [0.4, 0.4, 0.2],
    [0.05, 0.15, 0.8],
    [0.6, 0.2, 0.2],
    [0.25, 0.5, 0.25],
    [0.1, 0.1, 0.8],
    [0.7, 0.2, 0.1],
    [0.3, 0.45, 0.25],
    [0.2, 0.3, 0.5],
    [0.55, 0.15, 0.3],
    [0.33, 0.34, 0.33],
    [0.1, 0.2, 0.7],
    [0.45, 0.45, 0.1],
    [0.6, 0.3, 0.1],
    [0.2, 0.7, 0.1],
    [0.15, 0.25, 0.6],
    [0.5, 0.25, 0.25],
    [0.3, 0.3, 0.4],
    [0.9, 0.05, 0.05],
    [0.2, 0.6, 0.2],
];
const RET_EDITED: [[f64; 3]; 24] = [
    [0.48, 0.32, 0.2],
    [0.12, 0.66, 0.22],
    [0.2, 0.25, 0.55],
    [0.38, 0.36, 0.26],
    [0.3, 0.58, 0.12],
    [0.4, 0.4, 0.2],
    [0.06, 0.14, 0.8],
    [0.55, 0.25, 0.2],
    [0.27, 0.46, 0.27],
    [0.1, 0.12, 0.78],
    [0.65, 0.25, 0.1],
    [0.3, 0.44, 0.26],
    [0.22, 0.28, 0.5],
    [0.5, 0.2, 0.3],
    [0.32, 0.35, 0.33],
    [0.1, 0.25, 0.65],
    [0.46, 0.44, 0.1],
    [0.3, 0.6, 0.1],
    [0.2, 0.68, 0.12],
    [0.15, 0.3, 0.55],
    [0.45, 0.3, 0.25],
    [0.3, 0.28, 0.42],
    [0.85, 0.1, 0.05],
    [0.2, 0.55, 0.25],
];

const REL: u32 = 2;
const PARA_REL: u32 = 5;
const OBJ: u32 = 3;
const IRR: u32 = 4;
const CANDIDATES: [u32; 3] = [6, 7, 8];

/// Lookup-table model; a query outside the table is an error.
struct Table(HashMap<(Vec<u32>, Vec<u32>), f64>);

impl ProbabilityModel for Table {
    fn object_prob(&self, prompt: &TokenSeq, object: &TokenSeq) -> FsResult<f64> {
        self.0
            .get(&(prompt.0.clone(), object.0.clone()))
            .copied()
            .ok_or_else(|| fairstamp::Error::Argument(format!("no entry for {prompt:?} {object:?}")))
    }
}

fn fixture_table(retention: &[[f64; 3]; 24]) -> Table {
    let mut t = HashMap::new();
    for i in 0..24 {
        let (s1, s2) = (10 + i as u32, 40 + i as u32);
        t.insert((vec![s1, REL], vec![OBJ]), P_STEREO[i]);
        t.insert((vec![s2, REL], vec![OBJ]), P_COUNTER[i]);
        t.insert((vec![s1, REL], vec![IRR]), P_IRR_STEREO[i]);
        t.insert((vec![s2, REL], vec![IRR]), P_IRR_COUNTER[i]);
        t.insert((vec![s1, PARA_REL], vec![OBJ]), P_PARA_STEREO[i]);
        t.insert((vec![s2, PARA_REL], vec![OBJ]), P_PARA_COUNTER[i]);
        for (c, p) in CANDIDATES.iter().zip(retention[i]) {
            t.insert((vec![70 + i as u32], vec![*c]), p);
        }
    }
    Table(t)
}

fn fixture_bundle() -> DatasetBundle {
    let pair = |i: u32, rel: u32| {
        BiasPair::subject_swap(KnowledgeTriplet::new(vec![10 + i], vec![rel], vec![OBJ]), vec![40 + i])
            .with_irrelevant(vec![IRR])
    };
    DatasetBundle {
        bias_set: (0..24).map(|i| pair(i, REL)).collect(),
        paraphrase_set: (0..24)
            .map(|i| ParaphrasePair {
                source: i as usize,
                pair: pair(i, PARA_REL),
            })
            .collect(),
        retention_set: (0..24)
            .map(|i| RetentionItem {
                prompt: TokenSeq::new(vec![70 + i]),
                candidates: CANDIDATES.iter().map(|&c| TokenSeq::new(vec![c])).collect(),
                note: format!("fact {i}"),
            })
            .collect(),
        empty_sets_flagged: false,
    }
}

/// Brute-force percentages straight from the probability arrays.
struct OracleScores {
    ss: f64,
    ps: f64,
    rs: f64,
    retained: usize,
    lms: f64,
    icat: f64,
}

fn oracle_scores() -> OracleScores {
    let pct = |hits: usize, n: usize| 100.0 * hits as f64 / n as f64;
    let wins = |a: &[f64; 24], b: &[f64; 24]| (0..24).filter(|&i| a[i] > b[i]).count();
    let ss = pct(wins(&P_STEREO, &P_COUNTER), 24);
    let ps = pct(wins(&P_PARA_STEREO, &P_PARA_COUNTER), 24);
    let lms = pct(
        wins(&P_STEREO, &P_IRR_STEREO) + wins(&P_COUNTER, &P_IRR_COUNTER),
        48,
    );
    let first_max = |row: &[f64; 3]| {
        let mut best = 0;
        for j in 1..3 {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    };
    let retained = (0..24)
        .filter(|&i| first_max(&RET_BASE[i]) == first_max(&RET_EDITED[i]))
        .count();
    OracleScores {
        ss,
        ps,
        rs: pct(retained, 24),
        retained,
        lms,
        icat: lms * ss.min(100.0 - ss) / 50.0,
    }
}

fn criterion_metrics() -> Outcome {
    let bundle = fixture_bundle();
    bundle.validate().map_err(|e| e.to_string())?;
    let base = fixture_table(&RET_BASE);
    let edited = fixture_table(&RET_EDITED);
    let report: EvalReport = evaluate(&base, &edited, &bundle).map_err(|e| e.to_string())?;
    let o = oracle_scores();
    let got = [
        Some(report.ss),
        report.ps,
        report.rs,
        report.lms,
        report.icat,
    ];
    let want = [o.ss, o.ps, o.rs, o.lms, o.icat];
    let matches = got
        .iter()
        .zip(want)
        .all(|(g, w)| g.is_some_and(|g| close(g, w, 1e-9)));
    let arithmetic = o.retained == 23 && close(o.rs, 2300.0 / 24.0, 1e-9) && format!("{:.2}", o.rs) == "95.83";
    check(
        matches && arithmetic,
        format!(
            "SS {:.4} PS {:.4} RS {:.4} LMS {:.4} ICAT {:.4} vs oracle {:.4} {:.4} {:.4} {:.4} {:.4}",
            report.ss,
            report.ps.unwrap_or(f64::NAN),
            report.rs.unwrap_or(f64::NAN),
            report.lms.unwrap_or(f64::NAN),
            report.icat.unwrap_or(f64::NAN),
            o.ss,
            o.ps,
            o.rs,
            o.lms,
            o.icat
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Stamp identity

fn criterion_stamp_identity() -> Outcome {
    let config = ModelConfig::default();
    let base = Arc::new(Model::<f32>::init(config.clone()).map_err(|e| e.to_string())?);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probes: Vec<TokenSeq> = (0..64)
        .map(|_| {
            let len = rng.gen_range(1..=config.max_seq_len);
            TokenSeq::new(
                (0..len)
                    .map(|_| rng.gen_range(0..config.vocab_size as u32))
                    .collect::<Vec<_>>(),
            )
        })
        .collect();
    let world = gen_synthetic_world(&WorldSpec::default(), config.vocab_size, config.max_seq_len)
        .map_err(|e| e.to_string())?;
    let base_report = evaluate(&*base, &*base, &world.bundle).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut same_scores = true;
    for layer in 1..=config.num_layers {
        let stamp = FairnessStamp::<f32>::new(layer, config.model_dim, 64, layer as u64)
            .map_err(|e| e.to_string())?;
        let stamped = StampedModel::new(base.clone())
            .attach(stamp)
            .map_err(|e| e.to_string())?;
        for probe in &probes {
            let (a, _) = base.forward(probe).map_err(|e| e.to_string())?;
            let (b, _) = stamped.forward(probe).map_err(|e| e.to_string())?;
            for (x, y) in a.data.iter().zip(&b.data) {
                worst = worst.max((*x as f64 - *y as f64).abs());
            }
        }
        let r = evaluate(&*base, &stamped, &world.bundle).map_err(|e| e.to_string())?;
        same_scores &= r.ss == base_report.ss && r.icat == base_report.icat;
    }
    check(
        worst <= 1e-6 && same_scores,
        format!(
            "max |Δlogit| {worst:.2e} over 64 probes x {} layers; SS {} ICAT {:?} unchanged: {same_scores}",
            config.num_layers, base_report.ss, base_report.icat
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Gradient check

fn criterion_grad_check() -> Outcome {
    let base = Arc::new(
        Model::<f64>::init(ModelConfig {
            num_layers: 2,
            model_dim: 8,
            num_heads: 2,
            vocab_size: 16,
            max_seq_len: 10,
            ffn_hidden_dim: 16,
            seed: 21,
        })
        .map_err(|e| e.to_string())?,
    );
    let batch = vec![
        BiasPair::subject_swap(KnowledgeTriplet::new(vec![1, 2], vec![3], vec![4]), vec![1, 5]),
        BiasPair::subject_swap(KnowledgeTriplet::new(vec![1, 6], vec![7], vec![8, 9]), vec![1, 2]),
    ];
    let prefixes = vec![TokenSeq::new(vec![11]), TokenSeq::new(vec![12, 0, 3])];
    let template = TemplatePrompt::new(vec![10]).map_err(|e| e.to_string())?;
    let weights = LossWeights {
        alpha: 40.0,
        beta: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for layer in 1..=2 {
        let mut stamp = FairnessStamp::<f64>::new(layer, 8, 4, layer as u64).map_err(|e| e.to_string())?;
        stamp.keys.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        stamp.values.data.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
        for log_prob in [false, true] {
            let err = grad_check(&base, &[stamp.clone()], &batch, &prefixes, &template, &weights, log_prob)
                .map_err(|e| e.to_string())?;
            worst = worst.max(err);
        }
    }
    check(worst <= 1e-4, format!("max relative error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 4. Tracing anchors

/// A 2-layer model trained until it memorizes `det group rel -> object`.
fn memorizing_model() -> Result<(Model<f64>, Vec<BiasPair>), String> {
    const DET: u32 = 0;
    const RELATION: u32 = 1;
    let groups: Vec<u32> = (2..8).collect();
    let objects = [8u32, 9, 10, 8, 9, 10];
    let mut model = Model::<f64>::init(ModelConfig {
        num_layers: 2,
        model_dim: 16,
        num_heads: 2,
        vocab_size: 12,
        max_seq_len: 6,
        ffn_hidden_dim: 32,
        seed: 4,
    })
    .map_err(|e| e.to_string())?;
    let corpus: Vec<TokenSeq> = groups
        .iter()
        .zip(objects)
        .map(|(&g, o)| TokenSeq::new(vec![DET, g, RELATION, o]))
        .collect();
    train_base(
        &mut model,
        &corpus,
        &TrainHyper {
            lr: 1e-2,
            steps: 400,
            batch: 6,
            seed: 4,
        },
    )
    .map_err(|e| e.to_string())?;
    let mut pairs = Vec::new();
    for i in 0..groups.len() {
        for j in 0..groups.len() {
            if objects[i] != objects[j] {
                pairs.push(BiasPair::subject_swap(
                    KnowledgeTriplet::new(vec![DET, groups[i]], vec![RELATION], vec![objects[i]]),
                    vec![DET, groups[j]],
                ));
            }
        }
    }
    for (g, o) in groups.iter().zip(objects) {
        let p = model
            .object_prob(&TokenSeq::new(vec![DET, *g, RELATION]), &TokenSeq::new(vec![o]))
            .map_err(|e| e.to_string())?;
        if p < 0.9 {
            return Err(format!("model did not memorize group {g}: P = {p:.3}"));
        }
    }
    Ok((model, pairs))
}

/// Mean single-state IE per layer, from every `(layer, position)` patch of
/// the prompt. The shared determiner's single-state IE must vanish, so the
/// subject restoration reduces to the group position.
fn single_state_oracle(model: &Model<f64>, pairs: &[BiasPair]) -> Result<Vec<f64>, String> {
    let layers = model.num_layers();
    let mut sum = vec![0.0; layers];
    for pair in pairs {
        let (k1, k2) = (&pair.stereotyped, &pair.counterfactual);
        let object = &k1.object;
        let (_, states) = model.forward(&k1.prompt()).map_err(|e| e.to_string())?;
        let counter = k2.prompt();
        let p_star = model.object_prob(&counter, object).map_err(|e| e.to_string())?;
        for layer in 1..=layers {
            let mut site = Vec::new();
            for pos in 0..counter.len() {
                let patch = Patch::from_states(&states, layer, &[pos]);
                let p = model
                    .object_prob_patched(&counter, object, &[patch])
                    .map_err(|e| e.to_string())?;
                site.push(p - p_star);
            }
            if site[0].abs() > 1e-12 {
                return Err(format!("shared determiner has IE {}", site[0]));
            }
            sum[layer - 1] += site[1];
        }
    }
    Ok(sum.iter().map(|s| s / pairs.len() as f64).collect())
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best + 1
}

fn criterion_tracing() -> Outcome {
    let random = Model::<f64>::init(ModelConfig {
        num_layers: 3,
        model_dim: 16,
        num_heads: 2,
        vocab_size: 20,
        max_seq_len: 12,
        ffn_hidden_dim: 32,
        seed: 9,
    })
    .map_err(|e| e.to_string())?;

    // (a) Identical prompts: restoring any layer of a run into itself.
    let k = KnowledgeTriplet::new(vec![1, 2], vec![3], vec![5]);
    let prompt = k.prompt();
    let p = random.object_prob(&prompt, &k.object).map_err(|e| e.to_string())?;
    let te = p - random.object_prob(&prompt, &k.object).map_err(|e| e.to_string())?;
    let (_, states) = random.forward(&prompt).map_err(|e| e.to_string())?;
    let mut worst_a = te.abs();
    for layer in 1..=3 {
        for positions in [vec![0, 1], (0..prompt.len()).collect()] {
            let patch = Patch::from_states(&states, layer, &positions);
            let q = random
                .object_prob_patched(&prompt, &k.object, &[patch])
                .map_err(|e| e.to_string())?;
            worst_a = worst_a.max((q - p).abs());
        }
    }
    let a = worst_a <= 1e-9;

    // (b) All-token restoration of the last layer recovers TE.
    let (memo, memo_pairs) = memorizing_model()?;
    let mut worst_b: f64 = 0.0;
    let random_pair =
        BiasPair::subject_swap(KnowledgeTriplet::new(vec![1, 2], vec![3, 4], vec![5]), vec![1, 6]);
    let r = trace_pair(&random, &random_pair, PositionsMode::AllTokens).map_err(|e| e.to_string())?;
    let ie = r.indirect_effects.ok_or("no layer effects")?;
    worst_b = worst_b.max((ie[2] - r.total_effect).abs());
    for pair in &memo_pairs {
        let r = trace_pair(&memo, pair, PositionsMode::AllTokens).map_err(|e| e.to_string())?;
        let ie = r.indirect_effects.ok_or("no layer effects")?;
        worst_b = worst_b.max((ie[1] - r.total_effect).abs());
    }
    let b = worst_b <= 1e-5;

    // (c) Decisive layer of the memorizing model against the oracle.
    let oracle = single_state_oracle(&memo, &memo_pairs)?;
    let report =
        locate_decisive_layer(&memo, &memo_pairs, PositionsMode::SubjectTokens).map_err(|e| e.to_string())?;
    let mean_gap = report
        .mean_ie
        .iter()
        .zip(&oracle)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let c = report.decisive_layer == first_argmax(&oracle) && mean_gap <= 1e-9;

    check(
        a && b && c,
        format!(
            "(a) max |effect| {worst_a:.1e}; (b) max |IE_L - TE| {worst_b:.1e}; (c) layer {} vs oracle {} (mean IE {:?}, gap {mean_gap:.1e})",
            report.decisive_layer,
            first_argmax(&oracle),
            oracle
        ),
    )
}

// ---------------------------------------------------------------------------
// 5-9. End-to-end runs of the binary

const ACCEPTANCE_CONFIG: &str = include_str!("../../../configs/acceptance.json");

struct Run {
    out: PathBuf,
    wall: Duration,
}

fn fairstamp(args: &[&str], config: &Path, out: &Path) -> Result<Duration, String> {
    let start = Instant::now();
    let output = Command::new(env!("CARGO_BIN_EXE_fairstamp"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .env_remove("FAIRSTAMP_OUT")
        .env_remove("FAIRSTAMP_SEED")
        .output()
        .map_err(|e| format!("cannot launch fairstamp: {e}"))?;
    if !output.status.success() {
        return Err(format!(
            "fairstamp {args:?} exited with {}: {}",
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        ));
    }
    Ok(start.elapsed())
}

fn run_all(root: &Path, name: &str) -> Result<Run, String> {
    let config = root.join("acceptance.json");
    std::fs::write(&config, ACCEPTANCE_CONFIG).map_err(|e| e.to_string())?;
    let out = root.join(name);
    let wall = fairstamp(&["all"], &config, &out)?;
    Ok(Run { out, wall })
}

fn json(path: &Path) -> Result<Value, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("{key} missing"))
}

fn sha256(path: &Path) -> Result<String, String> {
    fairstamp::io::sha256_file(path).map_err(|e| e.to_string())
}

fn stage_ms(run: &Run, stage: &str) -> Result<f64, String> {
    let manifest = json(&run.out.join("run_manifest.json"))?;
    manifest["stages"][stage]["wall_ms"]
        .as_f64()
        .ok_or_else(|| format!("no wall time for stage {stage}"))
}

fn criterion_frozen_base(run: &Run) -> Outcome {
    let manifest = json(&run.out.join("run_manifest.json"))?;
    let recorded = manifest["stages"]["train-base"]["artifacts"]["base/weights.bin"]
        .as_str()
        .ok_or("train-base did not record the weights hash")?
        .to_string();
    let now = sha256(&run.out.join("base/weights.bin"))?;
    let base = fairstamp::model::load_checkpoint(&run.out.join("base")).map_err(|e| e.to_string())?;
    let summary = json(&run.out.join("edit/summary.json"))?;
    let summary_checksum = summary["base_checksum"].as_str().unwrap_or_default();
    let d = base.model_dim();
    let d_c = json(&run.out.join("run_manifest.json"))?["config"]["edit"]["d_c"]
        .as_u64()
        .ok_or("d_c missing")? as usize;
    let mut stamp_params = 0;
    for layer in summary["layers"].as_array().ok_or("layers missing")? {
        let dir = run.out.join(format!("edit/stamps/layer_{:02}", layer.as_u64().unwrap_or(0)));
        stamp_params += fairstamp::stamp::load_stamp(&dir)
            .map_err(|e| e.to_string())?
            .num_parameters();
    }
    let edit_ms = stage_ms(run, "edit")?;
    let reported = summary["stamp_parameters"].as_u64().unwrap_or(0) as usize;
    check(
        recorded == now
            && summary_checksum == base.checksum()
            && stamp_params == 2 * d_c * d
            && reported == stamp_params
            && edit_ms < 60_000.0,
        format!(
            "weights hash unchanged: {}; checksum {summary_checksum}; stamp params {stamp_params} = 2·{d_c}·{d}; edit {:.1}s",
            recorded == now,
            edit_ms / 1e3
        ),
    )
}

fn criterion_trend(run: &Run) -> Outcome {
    let bundle: DatasetBundle =
        fairstamp::data::load_jsonl(&run.out.join("data/bundle.jsonl")).map_err(|e| e.to_string())?;
    let pre = json(&run.out.join("eval/base_report.json"))?;
    let post = json(&run.out.join("eval/report.json"))?;
    let (ss0, ss1) = (num(&pre, "ss")?, num(&post, "ss")?);
    let (lms0, lms1) = (num(&pre, "lms")?, num(&post, "lms")?);
    let rs = num(&post, "rs")?;
    let closed = ((ss0 - 50.0).abs() - (ss1 - 50.0).abs()) / (ss0 - 50.0).abs();
    check(
        bundle.bias_set.len() >= 32
            && bundle.retention_set.len() >= 24
            && ss0 >= 65.0
            && closed >= 0.5
            && rs >= 90.0
            && (lms1 - lms0).abs() <= 5.0
            && run.wall < Duration::from_secs(600),
        format!(
            "SS {ss0:.2} -> {ss1:.2} ({:.0}% of the gap closed), RS {rs:.2}, LMS {lms0:.2} -> {lms1:.2}, {} pairs, {} retention items, run {:.0}s",
            100.0 * closed,
            bundle.bias_set.len(),
            bundle.retention_set.len(),
            run.wall.as_secs_f64()
        ),
    )
}

fn criterion_ablation(run: &Run, root: &Path) -> Outcome {
    let out = root.join("alpha0");
    for dir in ["data", "base"] {
        copy_dir(&run.out.join(dir), &out.join(dir)).map_err(|e| e.to_string())?;
    }
    let mut config: Value = serde_json::from_str(ACCEPTANCE_CONFIG).map_err(|e| e.to_string())?;
    config["loss"] = serde_json::json!({ "alpha": 0.0 });
    let path = root.join("alpha0.json");
    std::fs::write(&path, config.to_string()).map_err(|e| e.to_string())?;
    let wall = fairstamp(&["edit"], &path, &out)? + fairstamp(&["eval"], &path, &out)?;
    let rs0 = num(&json(&out.join("eval/report.json"))?, "rs")?;
    let rs40 = num(&json(&run.out.join("eval/report.json"))?, "rs")?;
    let combined = wall.as_secs_f64() + (stage_ms(run, "edit")? + stage_ms(run, "eval")?) / 1e3;
    check(
        rs0 < rs40 && combined < 900.0,
        format!("RS α=0 {rs0:.2} vs α=40 {rs40:.2}; edits {combined:.0}s"),
    )
}

fn criterion_continual(run: &Run) -> Outcome {
    let report = json(&run.out.join("continual/continual.json"))?;
    let stages = report["stages"].as_array().ok_or("stages missing")?;
    let ss = |stage: usize| stages.get(stage).and_then(|s| s["ss"][0].as_f64());
    let (a, b) = (ss(0).ok_or("stage 0 missing")?, ss(1).ok_or("stage 1 missing")?);
    let secs = stage_ms(run, "continual")? / 1e3;
    check(
        (b - a).abs() <= 5.0 && secs < 900.0,
        format!("SS(A) {a:.2} after A, {b:.2} after B; {secs:.0}s"),
    )
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(to)?;
    for entry in std::fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            std::fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

/// Relative path to bytes for every file under `dir`.
fn files_under(root: &Path, dir: &str, into: &mut BTreeMap<String, Vec<u8>>) -> std::io::Result<()> {
    let full = root.join(dir);
    if full.is_file() {
        into.insert(dir.to_string(), std::fs::read(full)?);
        return Ok(());
    }
    for entry in std::fs::read_dir(full)? {
        let name = entry?.file_name();
        files_under(root, &format!("{dir}/{}", name.to_string_lossy()), into)?;
    }
    Ok(())
}

fn criterion_determinism(first: &Run, second: &Run) -> Outcome {
    const COMPARED: [&str; 8] = [
        "edit/stamps",
        "edit/telemetry.csv",
        "edit/summary.json",
        "eval",
        "trace/location.json",
        "continual/stamps",
        "continual/telemetry.csv",
        "continual/continual.json",
    ];
    let mut a = BTreeMap::new();
    let mut b = BTreeMap::new();
    for dir in COMPARED {
        files_under(&first.out, dir, &mut a).map_err(|e| e.to_string())?;
        files_under(&second.out, dir, &mut b).map_err(|e| e.to_string())?;
    }
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    check(
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", a.len())
        } else {
            format!("differing files: {differing:?}")
        },
    )
}

// ---------------------------------------------------------------------------

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let mut outcome = f();
    let took = start.elapsed();
    if let (Some(limit), Ok(detail)) = (limit, &outcome) {
        if took > limit {
            outcome = Err(format!("{detail}; took {took:?}, limit {limit:?}"));
        }
    }
    (outcome, took)
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    const TRENDS: [&str; 3] = ["6 end-to-end trend", "7 loss ablation", "8 continual stability"];
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut record = |name, (outcome, took)| results.push((name, outcome, took));

    record("1 metric oracle", timed(Some(secs(1)), criterion_metrics));
    record("2 stamp identity", timed(Some(secs(5)), criterion_stamp_identity));
    record("3 gradient check", timed(Some(secs(30)), criterion_grad_check));
    record("4 tracing anchors", timed(Some(secs(60)), criterion_tracing));

    let root = tempfile::tempdir().expect("temporary directory");
    let first = run_all(root.path(), "run_a");
    let second = first.as_ref().ok().map(|_| run_all(root.path(), "run_b"));
    match &first {
        Ok(run) => {
            record("5 frozen base", timed(None, || criterion_frozen_base(run)));
            record("6 end-to-end trend", timed(None, || criterion_trend(run)));
            record("7 loss ablation", timed(None, || criterion_ablation(run, root.path())));
            record("8 continual stability", timed(None, || criterion_continual(run)));
            let det = match &second {
                Some(Ok(again)) => criterion_determinism(run, again),
                Some(Err(e)) => Err(e.clone()),
                None => Err("second run not attempted".into()),
            };
            record("9 determinism", (det, Duration::ZERO));
        }
        Err(e) => {
            for name in [
                "5 frozen base",
                "6 end-to-end trend",
                "7 loss ablation",
                "8 continual stability",
                "9 determinism",
            ] {
                record(name, (Err(e.clone()), Duration::ZERO));
            }
        }
    }

    let mut failed = 0;
    let mut gating = 0;
    for (name, outcome, took) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                gating += usize::from(!TRENDS.contains(name));
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {name}: {detail} [{:.2}s]", took.as_secs_f64());
    }
    println!(
        "acceptance: {} of {} criteria passed ({} failing properties)",
        results.len() - failed,
        results.len(),
        gating
    );
    if gating == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
