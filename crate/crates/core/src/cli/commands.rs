use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::ArchSpec;
use crate::latent::{alpha_strip, encode_batch, interpolation_grid, LatentCode};
use crate::model::{Cinn, ImageArch, VectorArch};
use crate::numerics::Tensor;
use crate::rng::{normal_tensor, Seed};
use crate::training::{self, dequantize, Dataset, TrainOutputs};
use crate::wavelet::Downsampling;

use super::config::{parse_run_config, task_preset, DataSource};
use super::diagnostics::{gradient_check_sampled, invertibility_error, logdet_error, FD_STEP};
use super::io::{image_grid, read_tensor, write_image, write_tensor};
use super::metrics::{best_of_n, mode_stats, pixel_variance};
use super::tasks::{colorize, generate, one_hot, Mixture, ToyTask, ToyTaskSpec};
use super::{Command, ConditionArgs, DataArgs, Metric, EXIT_DIAGNOSTICS, EXIT_DIVERGENCE, EXIT_OK};

const INVERTIBILITY_TOL: f64 = 1e-6;
const LOGDET_TOL: f64 = 1e-5;
const GRADIENT_TOL: f64 = 1e-4;
/// Largest dimension for which `check` builds a finite-difference Jacobian.
const MAX_JACOBIAN_DIM: usize = 1024;

pub(super) fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, out, metrics } => train(&config, &out, metrics),
        Command::Sample {
            ckpt,
            condition,
            n,
            temperature,
            seed,
            out_dir,
        } => {
            let model = load_model(&ckpt)?;
            let ys = conditions(&model, &condition)?;
            std::fs::create_dir_all(&out_dir)?;
            for i in 0..ys.batch() {
                let y = ys.sample(i);
                let x = model.sample(&y, n, temperature, Seed(seed).derive(&format!("condition-{i}")))?;
                let name = format!("samples_{i}");
                let image = write_outputs(&model, &out_dir, &name, &x, &vec![y; n], n)?;
                println!("condition {i}: {n} samples -> {}{}", name, image.map(|e| format!(" (+ .{e})")).unwrap_or_default());
            }
            Ok(EXIT_OK)
        }
        Command::Encode { ckpt, x, y, out } => {
            let model = load_model(&ckpt)?;
            let (x, y) = (read_tensor(&x)?, read_tensor(&y)?);
            check_rows(&model, &x, &y)?;
            let codes = encode_batch(&model, &x, &y)?;
            let z = stack_codes(&codes)?;
            write_tensor(&out, &z)?;
            let mean_sq = z.sq_norm() / z.len() as f64;
            println!("encoded {} codes of dimension {}; mean ‖z‖²/dim = {mean_sq:.4}", codes.len(), model.dim());
            Ok(EXIT_OK)
        }
        Command::Transfer {
            ckpt,
            z,
            condition,
            out_dir,
        } => {
            let model = load_model(&ckpt)?;
            let codes = read_codes(&model, &z)?;
            let ys = conditions(&model, &condition)?;
            let mut zs = Vec::new();
            let mut yrows = Vec::new();
            for c in &codes {
                for j in 0..ys.batch() {
                    zs.push(c.z.clone());
                    yrows.push(ys.sample(j));
                }
            }
            decode_and_write(&model, &out_dir, "transfer", zs, yrows, ys.batch())?;
            println!("decoded {} codes under {} conditions", codes.len(), ys.batch());
            Ok(EXIT_OK)
        }
        Command::Interpolate {
            ckpt,
            z,
            condition,
            grid,
            out_dir,
        } => {
            let model = load_model(&ckpt)?;
            let codes = read_codes(&model, &z)?;
            if codes.len() < 2 {
                return Err(Error::contract("interpolation needs at least two codes"));
            }
            let y = conditions(&model, &condition)?.sample(0);
            let cells = interpolation_grid(&codes[0], &codes[1], &grid)?;
            let zs = cells.into_iter().map(|c| c.z).collect::<Vec<_>>();
            let ys = vec![y; zs.len()];
            decode_and_write(&model, &out_dir, "interpolation", zs, ys, grid.len())?;
            println!("decoded a {0}×{0} interpolation grid", grid.len());
            Ok(EXIT_OK)
        }
        Command::Scale {
            ckpt,
            z,
            condition,
            alphas,
            out_dir,
        } => {
            let model = load_model(&ckpt)?;
            let code = read_codes(&model, &z)?.swap_remove(0);
            let y = conditions(&model, &condition)?.sample(0);
            let xs = alpha_strip(&model, &code, &y, &alphas)?;
            std::fs::create_dir_all(&out_dir)?;
            let x = Tensor::stack_rows(&xs)?;
            write_outputs(&model, &out_dir, "alpha_strip", &x, &vec![y; alphas.len()], alphas.len())?;
            println!("decoded α ∈ {alphas:?}");
            Ok(EXIT_OK)
        }
        Command::Eval {
            ckpt,
            metric,
            data,
            n,
            temperature,
            seed,
            noise_std,
            modes,
            limit,
        } => {
            let model = load_model(&ckpt)?;
            eval(&model, metric, &data, n, temperature, Seed(seed), noise_std, modes, limit)
        }
        Command::Check { ckpt, seed, max_params } => {
            let models = match ckpt {
                Some(path) => vec![("checkpoint".to_owned(), load_model(&path)?)],
                None => fresh_models(Seed(seed))?,
            };
            let mut ok = true;
            for (name, model) in &models {
                ok &= check(name, model, Seed(seed), max_params)?;
            }
            println!("{}", if ok { "all diagnostics passed" } else { "diagnostics FAILED" });
            Ok(if ok { EXIT_OK } else { EXIT_DIAGNOSTICS })
        }
        Command::GenTask { spec, out_dir } => {
            let text = std::fs::read_to_string(&spec)?;
            let spec: ToyTaskSpec =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("task spec: {e}")))?;
            spec.task.validate()?;
            let data = generate(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            write_tensor(&out_dir.join("x.tnsr"), &data.x)?;
            write_tensor(&out_dir.join("y.tnsr"), &data.y)?;
            println!("x {:?}, y {:?}", data.x.shape(), data.y.shape());
            Ok(EXIT_OK)
        }
    }
}

fn train(config: &Path, out: &Path, metrics: Option<std::path::PathBuf>) -> Result<i32> {
    let run = parse_run_config(&std::fs::read_to_string(config)?)?;
    let data = match &run.data {
        DataSource::Task(spec) => generate(spec)?,
        DataSource::Files { x, y } => Dataset::new(read_tensor(x)?, read_tensor(y)?)?,
    };
    let arch = run
        .model
        .arch(&data.x.shape()[1..], &data.y.shape()[1..], &run.train.ablation)?;
    let mut model = Cinn::new(arch, Seed(run.model.seed))?;
    let outputs = TrainOutputs {
        checkpoint: Some(out.to_owned()),
        metrics: metrics.or(run.metrics),
    };
    let report = training::train(&mut model, &data, &run.train, &outputs)?;
    if let Some(last) = report.records.last() {
        println!(
            "step {}: cml {:.5}, nll {:.5} nats/dim",
            last.step, last.cml, last.nll_nats_per_dim
        );
    }
    if let Some(d) = &report.divergence {
        eprintln!(
            "training diverged at step {}: {}; checkpoint holds step {}",
            d.step, d.reason, d.restored_step
        );
        return Ok(EXIT_DIVERGENCE);
    }
    Ok(EXIT_OK)
}

fn load_model(path: &Path) -> Result<Cinn> {
    training::load(path)?.model()
}

fn per_sample_shape(batch: usize, rest: &[usize]) -> Vec<usize> {
    let mut s = vec![batch];
    s.extend_from_slice(rest);
    s
}

/// Accept a single sample (no leading axis) or a batch.
fn as_rows(t: Tensor, per_sample: &[usize], what: &'static str) -> Result<Tensor> {
    if t.shape() == per_sample {
        return t.reshape(&per_sample_shape(1, per_sample));
    }
    if t.rank() >= 1 && &t.shape()[1..] == per_sample {
        return Ok(t);
    }
    Err(Error::shape(what, t.shape(), per_sample))
}

fn conditions(model: &Cinn, args: &ConditionArgs) -> Result<Tensor> {
    let shape = model.condition_shape();
    if let Some(k) = args.condition.strip_prefix("class:") {
        let k: usize = k
            .parse()
            .map_err(|_| Error::Config(format!("bad class index `{k}`")))?;
        if shape.len() != 1 || k >= shape[0] {
            return Err(Error::Config(format!("class {k} does not fit condition shape {shape:?}")));
        }
        return Ok(one_hot(k, shape[0]));
    }
    if let Some(kind) = args.condition.strip_prefix("task:") {
        let data = generate(&ToyTaskSpec {
            task: task_preset(kind)?,
            seed: args.condition_seed,
            samples: args.conditions.max(1),
        })?;
        return as_rows(data.y, &shape, "task condition");
    }
    as_rows(read_tensor(Path::new(&args.condition))?, &shape, "condition file")
}

fn check_rows(model: &Cinn, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.rank() == 0 || x.shape()[1..] != *model.input_shape() {
        return Err(Error::shape("x", x.shape(), model.input_shape()));
    }
    if y.rank() == 0 || y.shape()[1..] != model.condition_shape()[..] {
        return Err(Error::shape("y", y.shape(), &model.condition_shape()));
    }
    if x.batch() != y.batch() {
        return Err(Error::shape("batch", x.shape(), y.shape()));
    }
    Ok(())
}

fn read_codes(model: &Cinn, path: &Path) -> Result<Vec<LatentCode>> {
    let z = as_rows(read_tensor(path)?, &[model.dim()], "latent codes")?;
    Ok((0..z.batch()).map(|i| LatentCode::new(z.sample(i))).collect())
}

fn stack_codes(codes: &[LatentCode]) -> Result<Tensor> {
    let rows: Vec<Tensor> = codes
        .iter()
        .map(|c| c.z.reshape(&[1, c.dim()]))
        .collect::<Result<_>>()?;
    Tensor::stack_rows(&rows)
}

fn decode_and_write(
    model: &Cinn,
    out_dir: &Path,
    name: &str,
    zs: Vec<Tensor>,
    ys: Vec<Tensor>,
    cols: usize,
) -> Result<()> {
    let z = Tensor::stack_rows(
        &zs.iter()
            .map(|z| z.reshape(&[1, model.dim()]))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let y = Tensor::stack_rows(&ys)?;
    let x = model.inverse(&z, &y)?;
    std::fs::create_dir_all(out_dir)?;
    write_outputs(model, out_dir, name, &x, &ys, cols)?;
    Ok(())
}

/// Displayable image for one sample, when the shapes allow it: chroma
/// targets are recombined with their luminance condition, flat 64-vectors
/// are shown as 8×8 glyphs, and 1- or 3-channel images are written as-is.
fn render(model: &Cinn, x: &Tensor, y: &Tensor) -> Option<Tensor> {
    let xs = model.input_shape();
    let ys = model.condition_shape();
    match (xs, ys.as_slice()) {
        ([2, h, w], [1, hy, wy]) if h == hy && w == wy => {
            colorize(&y.reshape(&[1, *h, *w]).ok()?, &x.reshape(&[2, *h, *w]).ok()?).ok()
        }
        ([64], _) => Some(x.reshape(&[1, 8, 8]).ok()?.map(|v| 0.5 * (v + 1.0))),
        ([1 | 3, _, _], _) => x.reshape(xs).ok(),
        _ => None,
    }
}

/// Write `x` as a tensor file and, when renderable, as an image grid.
/// Returns the image extension if one was written.
fn write_outputs(
    model: &Cinn,
    out_dir: &Path,
    name: &str,
    x: &Tensor,
    ys: &[Tensor],
    cols: usize,
) -> Result<Option<&'static str>> {
    write_tensor(&out_dir.join(format!("{name}.tnsr")), x)?;
    let tiles: Option<Vec<Tensor>> = (0..x.batch()).map(|i| render(model, &x.sample(i), &ys[i])).collect();
    let Some(tiles) = tiles else { return Ok(None) };
    let grid = image_grid(&tiles, cols.max(1), 1.0)?;
    let ext = if grid.shape()[0] == 1 { "pgm" } else { "ppm" };
    write_image(&out_dir.join(format!("{name}.{ext}")), &grid)?;
    Ok(Some(ext))
}

fn eval_data(args: &DataArgs) -> Result<(Dataset, Option<ToyTask>)> {
    match (&args.x, &args.y, &args.task) {
        (Some(x), Some(y), None) => Ok((Dataset::new(read_tensor(x)?, read_tensor(y)?)?, None)),
        (None, None, Some(kind)) => {
            let task = task_preset(kind)?;
            let data = generate(&ToyTaskSpec {
                task: task.clone(),
                seed: args.task_seed,
                samples: args.samples,
            })?;
            Ok((data, Some(task)))
        }
        _ => Err(Error::Config("eval needs either --x/--y or --task".into())),
    }
}

#[allow(clippy::too_many_arguments)]
fn eval(
    model: &Cinn,
    metric: Metric,
    data: &DataArgs,
    n: usize,
    temperature: f64,
    seed: Seed,
    noise_std: f64,
    modes: usize,
    limit: Option<usize>,
) -> Result<i32> {
    if metric == Metric::Modes {
        let mixture = match modes {
            2 => Mixture::two_mode(),
            8 => Mixture::eight_mode(),
            m => return Err(Error::Config(format!("mixture presets have 2 or 8 modes, not {m}"))),
        };
        let k = mixture.weights.len();
        if model.condition_shape() != [k] || model.input_shape() != [2] {
            return Err(Error::Config(format!(
                "model shapes {:?} | {:?} do not match the {modes}-mode mixture",
                model.input_shape(),
                model.condition_shape()
            )));
        }
        for c in 0..k {
            let pts = model.sample(&one_hot(c, k), n, temperature, seed.derive(&format!("condition-{c}")))?;
            let stats = mode_stats(&pts, &mixture)?;
            let fmt = |v: &[f64]| v.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" ");
            println!(
                "condition {c}: frequencies [{}] (true [{}]), sum {:.3}",
                fmt(&stats.frequencies),
                fmt(&mixture.weights[c]),
                stats.frequencies.iter().sum::<f64>()
            );
        }
        return Ok(EXIT_OK);
    }

    let (mut data, task) = eval_data(data)?;
    check_rows(model, &data.x, &data.y)?;
    if let Some(l) = limit {
        let l = l.min(data.len());
        data = Dataset::new(data.x.rows(0, l), data.y.rows(0, l))?;
    }
    match metric {
        Metric::Nll => {
            let x = if noise_std > 0.0 {
                dequantize(&data.x, noise_std, &mut seed.stream("test-noise"))
            } else {
                data.x.clone()
            };
            let loss = model.evaluate(&x, &data.y)?;
            println!("nll {:.6} nats/dim over {} samples", loss.nll_nats_per_dim, data.len());
            if let Some(h) = task.as_ref().and_then(|t| t.conditional_entropy_per_dim()) {
                println!("conditional entropy bound {h:.6} nats/dim");
            }
        }
        Metric::BestOfN | Metric::Variance => {
            let (mut best, mut var) = (0.0, 0.0);
            for i in 0..data.len() {
                let s = model.sample(&data.y.sample(i), n, temperature, seed.derive(&format!("row-{i}")))?;
                let samples: Vec<Tensor> = (0..n).map(|k| s.sample(k)).collect();
                best += best_of_n(&samples, &data.x.sample(i))?;
                var += pixel_variance(&samples)?;
            }
            let m = data.len() as f64;
            if metric == Metric::BestOfN {
                println!("best-of-{n} mse {:.6} (mean over {} conditions)", best / m, data.len());
            }
            println!("pixel variance {:.6} across {n} samples", var / m);
        }
        Metric::Modes => unreachable!(),
    }
    Ok(EXIT_OK)
}

fn fresh_models(seed: Seed) -> Result<Vec<(String, Cinn)>> {
    let vector: ArchSpec = VectorArch {
        dim: 6,
        conditioning: crate::conditioning::ConditioningSpec::Mlp {
            input: 3,
            hidden: 8,
            width: 4,
        },
        blocks: 3,
        hidden: 8,
        batch_norm: false,
        permute: true,
        clamp: true,
    }
    .build();
    let image = ImageArch {
        input: [2, 4, 4],
        condition: [1, 4, 4],
        conv_blocks: vec![1, 1],
        dense_blocks: 1,
        conv_hidden: 4,
        dense_hidden: 8,
        cond_width: 2,
        batch_norm: true,
        permute: true,
        clamp: true,
        downsampling: Downsampling::Haar,
        split: true,
    }
    .build();
    Ok(vec![
        ("fresh vector model".to_owned(), Cinn::new(vector, seed)?),
        ("fresh image model".to_owned(), Cinn::new(image, seed)?),
    ])
}

fn check(name: &str, model: &Cinn, seed: Seed, max_params: usize) -> Result<bool> {
    let mut rng = seed.stream("check");
    let x = normal_tensor(&per_sample_shape(3, model.input_shape()), 1.0, &mut rng);
    let y = normal_tensor(&per_sample_shape(3, &model.condition_shape()), 1.0, &mut rng);
    let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
    let mut all = true;

    let inv = invertibility_error(model, &x, &y)?;
    all &= inv < INVERTIBILITY_TOL;
    println!("{} {name}: invertibility max error {inv:.3e}", verdict(inv < INVERTIBILITY_TOL));

    if model.dim() <= MAX_JACOBIAN_DIM {
        let ld = logdet_error(model, &x.rows(0, 1), &y.rows(0, 1))?;
        all &= ld < LOGDET_TOL;
        println!("{} {name}: log-determinant vs finite differences {ld:.3e}", verdict(ld < LOGDET_TOL));
    } else {
        println!("SKIP {name}: dimension {} too large for a dense Jacobian", model.dim());
    }

    let g = gradient_check_sampled(model, &x, &y, FD_STEP, max_params)?;
    let ok = g.relative_error < GRADIENT_TOL;
    all &= ok;
    println!(
        "{} {name}: gradient relative error {:.3e} over {} parameters",
        verdict(ok),
        g.relative_error,
        g.checked
    );
    Ok(all)
}
