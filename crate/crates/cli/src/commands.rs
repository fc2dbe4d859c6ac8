use std::fs;
use std::path::{Path, PathBuf};

use fidel::attack::{extract_partials, reconstruct_single, save_partials, PartialReconstruction};
use fidel::config::ExperimentConfig;
use fidel::data::{emit_grid, emit_image, sample_private, DataRoot, SampleSource};
use fidel::eval::{
    count_revealed, pearson, prepare_generator, prepare_victim, run_sweep, victim_seed, ExperimentData,
};
use fidel::fed::{accuracy, append_round_log, client_train, ClientConfig};
use fidel::genrec::{generate, generate_batch_candidates, Generator};
use fidel::nn::arch::VictimArch;
use fidel::nn::codec::{save_model, UpdateMeta};
use fidel::nn::{Activation, Model};
use fidel::rng::derive_seed;
use fidel::{FidelError, Result, Tensor};

const GRID_TILES: usize = 24;
const GRID_COLS: usize = 8;

fn prepare_out(cfg: &ExperimentConfig, subdirs: &[&str]) -> Result<PathBuf> {
    let out = cfg.out.clone();
    for dir in std::iter::once("").chain(subdirs.iter().copied()) {
        let path = out.join(dir);
        fs::create_dir_all(&path).map_err(|e| FidelError::io(&path, e))?;
    }
    let snapshot = out.join("config.snapshot");
    fs::write(&snapshot, cfg.render()).map_err(|e| FidelError::io(&snapshot, e))?;
    Ok(out)
}

fn load_data(cfg: &ExperimentConfig, root: &DataRoot) -> Result<ExperimentData> {
    let dir = match cfg.dataset {
        fidel::data::Source::Mnist => root.mnist_dir(),
        fidel::data::Source::Cifar10 => root.cifar_dir(),
    };
    if !dir.is_dir() {
        return Err(FidelError::Config(format!(
            "{} dataset not found at {} (set --data-root or {})",
            cfg.dataset,
            dir.display(),
            DataRoot::ENV
        )));
    }
    ExperimentData::load(root, cfg)
}

fn first_setting(cfg: &ExperimentConfig) -> (Activation, bool) {
    (cfg.activations[0], cfg.dropout[0])
}

struct Victim {
    model: Model,
    generator: Option<Generator>,
    seed: u64,
}

fn victim_for(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<Victim> {
    let (activation, dropout) = first_setting(cfg);
    let seed = victim_seed(cfg.seed, activation, dropout);
    let model = prepare_victim(cfg, data, activation, dropout, seed)?;
    let generator = match cfg.arch {
        VictimArch::Cnn => Some(prepare_generator(cfg, data, &model, seed)?),
        VictimArch::Fcnn => None,
    };
    Ok(Victim { model, generator, seed })
}

fn kind_name(p: &PartialReconstruction) -> &'static str {
    match (p.dead, p.is_exact()) {
        (true, _) => "dead",
        (false, true) => "exact",
        (false, false) => "unbiased",
    }
}

fn abs_r(a: &Tensor, b: &Tensor) -> Option<f64> {
    pearson(a.data(), b.data()).map(f64::abs)
}

fn fmt_r(r: Option<f64>) -> String {
    r.map(|r| format!("{r:.9}")).unwrap_or_default()
}

/// The first `count` channels of an `H x W x C` tensor as `H x W x 1` tiles.
fn channel_tiles(t: &Tensor, count: usize) -> Result<Vec<Tensor>> {
    let [h, w, c] = t.shape() else {
        return Err(FidelError::Shape(format!("expected H x W x C, got {:?}", t.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    Ok((0..count.min(c))
        .map(|k| {
            let data = t.data().iter().skip(k).step_by(c).copied().collect();
            Tensor::new(vec![h, w, 1], data).expect("channel tile")
        })
        .collect())
}

/// Partials reshaped for display: input-space images for dense-first
/// victims, the leading channels of one neuron for convolutional ones.
fn partial_tiles(cfg: &ExperimentConfig, partials: &[PartialReconstruction], neuron: usize) -> Result<Vec<Tensor>> {
    match cfg.arch {
        VictimArch::Fcnn => Ok(partials.iter().take(GRID_TILES).map(|p| p.values.clone()).collect()),
        VictimArch::Cnn => channel_tiles(&partials[neuron].values, GRID_TILES),
    }
}

/// One attack round on `indices` of the private pool.
struct Round {
    private: Vec<Tensor>,
    labels: Vec<u8>,
    partials: Vec<PartialReconstruction>,
    meta: UpdateMeta,
}

fn run_round(cfg: &ExperimentConfig, data: &ExperimentData, victim: &Victim, indices: &[usize]) -> Result<Round> {
    let local = data.private.subset(indices.to_vec());
    let client = ClientConfig {
        epochs: 1,
        batch_size: cfg.batch_mode.batch_size(indices.len()),
        learning_rate: cfg.learning_rate,
        seed: derive_seed(victim.seed, 7),
    };
    let (_, update) = client_train(&victim.model, &local, &client)?;
    if !update.deltas.all_finite() {
        return Err(FidelError::Numerical("client update is not finite".into()));
    }
    let partials = extract_partials(&update, &victim.model, cfg.dead_threshold)?;
    append_round_log(&cfg.out.join("rounds.csv"), std::slice::from_ref(&update))?;
    Ok(Round {
        private: (0..local.len()).map(|i| local.image(i)).collect(),
        labels: (0..local.len()).map(|i| local.label(i)).collect(),
        partials,
        meta: update.meta,
    })
}

/// Candidate per partial: the partial itself for dense-first victims, the
/// generator output for live exact partials of convolutional ones.
fn candidates(cfg: &ExperimentConfig, data: &ExperimentData, victim: &Victim, partials: &[PartialReconstruction]) -> Result<Vec<(usize, Tensor)>> {
    match (&victim.generator, cfg.arch) {
        (Some(gen), VictimArch::Cnn) => generate_batch_candidates(gen, partials, cfg.renormalize),
        _ => partials
            .iter()
            .filter(|p| !p.dead)
            .map(|p| Ok((p.neuron, p.values.clone().reshape(data.sample_shape())?)))
            .collect(),
    }
}

fn remove_stale(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_file(path).map_err(|e| FidelError::io(path, e))?;
    }
    Ok(())
}

pub fn demo_single(cfg: &ExperimentConfig, root: &DataRoot) -> Result<()> {
    let out = prepare_out(cfg, &["partials", "candidates"])?;
    remove_stale(&out.join("rounds.csv"))?;
    let data = load_data(cfg, root)?;
    let victim = victim_for(cfg, &data)?;
    let indices = sample_private(data.private.len(), 1, derive_seed(victim.seed, 11))?;
    let round = run_round(cfg, &data, &victim, &indices)?;
    let sample = &round.private[0];
    let best = reconstruct_single(&round.partials).ok_or(FidelError::Empty("partials"))?;

    emit_image(sample, &out.join(format!("private.{}", ext(sample))), false)?;
    let tiles = partial_tiles(cfg, &round.partials, best.neuron)?;
    emit_grid(&tiles, GRID_COLS, &out.join("partials").join(format!("grid.{}", ext(&tiles[0]))), true)?;
    save_partials(&round.partials, round.meta, &out.join("partials").join("partials.fidu"))?;

    let generated: Vec<(usize, Tensor)> = candidates(cfg, &data, &victim, &round.partials)?;
    let best_candidate = match cfg.arch {
        VictimArch::Fcnn => best.values.clone().reshape(data.sample_shape())?,
        VictimArch::Cnn => {
            let gen = victim.generator.as_ref().expect("generator for convolutional victim");
            generate(gen, &best.values)?
        }
    };
    emit_image(&best_candidate, &out.join("candidates").join(format!("best.{}", ext(&best_candidate))), true)?;

    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    w.write_record(["neuron", "kind", "bias_delta", "abs_r"])?;
    for p in &round.partials {
        let r = match cfg.arch {
            VictimArch::Fcnn if !p.dead => abs_r(&p.values, sample),
            VictimArch::Cnn => generated.iter().find(|(n, _)| *n == p.neuron).and_then(|(_, c)| abs_r(c, sample)),
            _ => None,
        };
        w.write_record([p.neuron.to_string(), kind_name(p).into(), format!("{:e}", p.bias_delta), fmt_r(r)])
            ?;
    }
    w.flush().map_err(|e| FidelError::io(&out, e))?;

    let best_r = abs_r(&best_candidate, sample);
    let mut s = csv::Writer::from_path(out.join("summary.csv"))?;
    s.write_record(["metric", "value"])?;
    s.write_record(["label", &round.labels[0].to_string()])?;
    s.write_record(["best_neuron", &best.neuron.to_string()])?;
    s.write_record(["best_abs_r", &fmt_r(best_r)])?;
    s.write_record(["live_exact", &round.partials.iter().filter(|p| p.is_exact()).count().to_string()])
        ?;
    s.flush().map_err(|e| FidelError::io(&out, e))?;
    log::info!("best |r| = {}", fmt_r(best_r));
    Ok(())
}

fn ext(t: &Tensor) -> &'static str {
    if t.shape().last() == Some(&3) {
        "ppm"
    } else {
        "pgm"
    }
}

pub fn demo_batch(cfg: &ExperimentConfig, root: &DataRoot) -> Result<()> {
    let n = cfg.n[0];
    if n < 2 {
        return Err(FidelError::Config(format!("demo-batch needs n >= 2, got {n}")));
    }
    let out = prepare_out(cfg, &["partials", "candidates"])?;
    remove_stale(&out.join("rounds.csv"))?;
    let data = load_data(cfg, root)?;
    let victim = victim_for(cfg, &data)?;
    let indices = sample_private(data.private.len(), n, derive_seed(victim.seed, 12))?;
    let round = run_round(cfg, &data, &victim, &indices)?;

    let batch_ext = ext(&round.private[0]);
    emit_grid(&round.private, GRID_COLS.min(n), &out.join(format!("batch.{batch_ext}")), false)?;
    let strongest = round
        .partials
        .iter()
        .filter(|p| !p.dead)
        .max_by(|a, b| a.bias_delta.abs().total_cmp(&b.bias_delta.abs()))
        .map_or(0, |p| p.neuron);
    let tiles = partial_tiles(cfg, &round.partials, strongest)?;
    emit_grid(&tiles, GRID_COLS, &out.join("partials").join(format!("grid.{}", ext(&tiles[0]))), true)?;
    save_partials(&round.partials, round.meta, &out.join("partials").join("partials.fidu"))?;

    let cands = candidates(cfg, &data, &victim, &round.partials)?;
    let mosaic = out.join("candidates").join(format!("mosaic.{batch_ext}"));
    let cand_tensors: Vec<Tensor> = cands.iter().map(|(_, c)| c.clone()).collect();
    if cand_tensors.is_empty() {
        remove_stale(&mosaic)?;
    } else {
        emit_grid(&cand_tensors, 16, &mosaic, true)?;
    }
    let reveal = count_revealed(&cand_tensors, &round.private, cfg.threshold)?;

    let mut w = csv::Writer::from_path(out.join("results.csv"))?;
    w.write_record(["sample", "pool_index", "label", "best_abs_r", "revealed"])?;
    for (k, &idx) in indices.iter().enumerate() {
        w.write_record([
            k.to_string(),
            idx.to_string(),
            round.labels[k].to_string(),
            format!("{:.9}", reveal.best_per_sample[k]),
            reveal.revealed_mask[k].to_string(),
        ])
        ?;
    }
    w.flush().map_err(|e| FidelError::io(&out, e))?;

    let dead = round.partials.iter().filter(|p| p.dead).count();
    let mut s = csv::Writer::from_path(out.join("summary.csv"))?;
    s.write_record(["metric", "value"])?;
    s.write_record(["n", &n.to_string()])?;
    s.write_record(["revealed", &reveal.revealed.to_string()])?;
    s.write_record(["candidates", &cands.len().to_string()])?;
    s.write_record(["dead_neurons", &dead.to_string()])?;
    s.flush().map_err(|e| FidelError::io(&out, e))?;
    log::info!("revealed {} of {n} ({} candidates, {dead} dead neurons)", reveal.revealed, cands.len());
    Ok(())
}

pub fn sweep(cfg: &ExperimentConfig, root: &DataRoot) -> Result<()> {
    let out = prepare_out(cfg, &[])?;
    let data = load_data(cfg, root)?;
    let report = run_sweep(cfg, &data)?;
    report.write_results(&out.join("results.csv"))?;
    report.write_summary(&out.join("summary.csv"))?;
    report.write_plot_data(&out.join("plot.tsv"))?;
    for c in &report.cells {
        log::info!(
            "{} dropout={} n={}: {:.3} +- {:.3}",
            c.activation.name(),
            c.dropout,
            c.n,
            c.mean,
            c.stderr
        );
    }
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, root: &DataRoot) -> Result<()> {
    let out = prepare_out(cfg, &["models"])?;
    let data = load_data(cfg, root)?;
    let mut w = csv::Writer::from_path(out.join("pretrain.csv"))?;
    w.write_record(["activation", "dropout", "epochs", "private_pool_accuracy"])?;
    for &activation in &cfg.activations {
        for &dropout in &cfg.dropout {
            let seed = victim_seed(cfg.seed, activation, dropout);
            let model = prepare_victim(cfg, &data, activation, dropout, seed)?;
            let acc = accuracy(&model, &data.private)?;
            let name = format!("victim-{}-{}.fidm", activation.name(), if dropout { "dropout" } else { "plain" });
            save_model(&model, &out.join("models").join(name))?;
            w.write_record([
                activation.name().to_string(),
                dropout.to_string(),
                cfg.pretrain_epochs.to_string(),
                format!("{acc:.6}"),
            ])
            ?;
            log::info!("{} dropout={dropout}: accuracy {acc:.4}", activation.name());
        }
    }
    w.flush().map_err(|e| FidelError::io(&out, e))
}

pub fn train_generator(cfg: &ExperimentConfig, root: &DataRoot) -> Result<()> {
    if cfg.arch != VictimArch::Cnn {
        return Err(FidelError::Config("train-generator needs arch = cnn".into()));
    }
    let out = prepare_out(cfg, &["models"])?;
    let data = load_data(cfg, root)?;
    let victim = victim_for(cfg, &data)?;
    let gen = victim.generator.as_ref().expect("generator for convolutional victim");
    save_model(&victim.model, &out.join("models").join("victim.fidm"))?;
    gen.save(&out.join("models").join("generator.fidm"))?;
    let mut w = csv::Writer::from_path(out.join("generator.csv"))?;
    w.write_record(["epoch", "train_mse", "validation_mse", "complete"])?;
    for e in &gen.curve {
        w.write_record([
            e.epoch.to_string(),
            format!("{:.9}", e.train),
            e.validation.map(|v| format!("{v:.9}")).unwrap_or_default(),
            e.complete.to_string(),
        ])
        ?;
    }
    w.flush().map_err(|e| FidelError::io(&out, e))
}
