use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use damd_core::augmentation::{
    crop_face, load_sample, read_annotations, read_jsonl, resolve_image_path, rotate_profile,
    synthesize_virtual_sample, write_jsonl, Annotation, TrainingSample, CROP_SIZE,
};
use damd_core::evaluation::{
    ced_csv, ced_curve, densenet121, mobilenet_v2, nme, resnext50_32x4d, yaw_bin_report, BinReport, ComplexityRow,
    EvalSample, Prediction,
};
use damd_core::imaging::RgbImage;
use damd_core::losses::{CombinedLossConfig, WingConfig};
use damd_core::morphable::{
    generate_synthetic_model, landmark_visibility, project_landmarks, read_model, write_model, EulerPose,
    MorphableModel, ParamVector, NUM_EXP, NUM_ID,
};
use damd_core::network::{build_network, init_params, BuildOptions, NetworkSpec, Variant};
use damd_core::render::{overlay_landmarks, rasterize, Background};
use damd_core::rng::SeedStreams;
use damd_core::tensor::{read_weights, write_weights};
use damd_core::train::{learning_rate, predict, scaled_milestones, target_statistics, training_weights, Trainer};
use damd_core::{ParamStore, Tensor};

use crate::{Cli, Command, Failure, NetArgs, TrainArgs};

type Outcome<T = ()> = Result<T, Failure>;

pub fn run(cli: &Cli) -> Outcome {
    let streams = SeedStreams::new(cli.seed);
    match &cli.command {
        Command::GenModel { vertices } => gen_model(cli, &streams, *vertices),
        Command::GenData { count } => gen_data(cli, &streams, *count),
        Command::Train(args) => train(cli, &streams, args),
        Command::Fit { data, net, render } => fit(cli, data, net, render.as_deref()),
        Command::Eval { data, predictions } => eval(cli, data, predictions),
        Command::Analyze { width, input_size } => analyze(cli, *width, *input_size),
        Command::Render { data, yaw, pitch, roll, size } => match data {
            Some(d) => render_annotations(cli, d),
            None => render_pose(cli, [*pitch, *yaw, *roll], *size),
        },
        Command::Augment { data, max_delta } => augment(cli, &streams, data, *max_delta),
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Outcome<&'a Path> {
    value.as_deref().ok_or_else(|| Failure::Usage(format!("`{command}` requires --{flag}")))
}

fn load_model(cli: &Cli, command: &str) -> Outcome<MorphableModel> {
    Ok(read_model(required(&cli.model, "model", command)?)?)
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| Failure::Data(anyhow!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Data(anyhow!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

fn spec_for(net: &NetArgs) -> Outcome<NetworkSpec> {
    let opts = BuildOptions { width: net.width, input_size: CROP_SIZE, dense_concat: true };
    Ok(build_network(net.variant, &opts)?)
}

fn gen_model(cli: &Cli, streams: &SeedStreams, vertices: usize) -> Outcome {
    let out = required(&cli.out, "out", "gen-model")?;
    let model = generate_synthetic_model(streams.derive("model-gen"), vertices)?;
    write_model(out, &model)?;
    Ok(())
}

/// Writes `images/NNNNNN.ppm` for each sample and one annotation line per
/// image into `annotations.jsonl` under `dir`.
fn write_dataset(dir: &Path, samples: &[TrainingSample]) -> Outcome {
    create_dir(&dir.join("images"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:06}.ppm");
        s.image.write_ppm(&dir.join(&rel))?;
        records.push(Annotation::from_sample(s, rel));
    }
    write_jsonl(&dir.join("annotations.jsonl"), &records)?;
    Ok(())
}

fn gen_data(cli: &Cli, streams: &SeedStreams, count: usize) -> Outcome {
    let out = required(&cli.out, "out", "gen-data")?;
    let model = load_model(cli, "gen-data")?;
    let samples = (0..count as u64)
        .map(|i| synthesize_virtual_sample(&model, streams.derive_indexed("data-gen", i)))
        .collect::<Result<Vec<_>, _>>()?;
    write_dataset(out, &samples)
}

fn augment(cli: &Cli, streams: &SeedStreams, data: &Path, max_delta: f64) -> Outcome {
    let out = required(&cli.out, "out", "augment")?;
    let model = load_model(cli, "augment")?;
    if !(0.0..=90.0).contains(&max_delta) {
        return Err(Failure::Usage(format!("--max-delta must be within [0, 90], got {max_delta}")));
    }
    let mut rng = streams.stream("augment");
    let mut samples = Vec::new();
    for a in read_annotations(data)? {
        let params =
            a.params.as_ref().ok_or_else(|| Failure::Data(anyhow!("{}: augment needs params", a.image_path)))?;
        let image = RgbImage::read_ppm(&resolve_image_path(data, &a.image_path))?;
        let source = TrainingSample::from_params(&model, image, ParamVector::from_slice(params)?, a.bbox)?;
        // turn away from the camera so the profile grows, staying within ±90°
        let mut delta = rng.random_range(0.0..=max_delta);
        if source.yaw_deg < 0.0 {
            delta = -delta;
        }
        if (source.yaw_deg + delta).abs() > 90.0 {
            delta = delta.signum() * (90.0 - source.yaw_deg.abs()).max(0.0);
        }
        let rotated = rotate_profile(&source, &model, delta)?;
        let fb = rasterize(
            &model,
            &rotated.params,
            source.image.width(),
            source.image.height(),
            Background::Image(&source.image),
        )?;
        samples.push(TrainingSample { image: fb.color, ..rotated });
    }
    write_dataset(out, &samples)
}

#[derive(Serialize)]
struct TrainSummary {
    variant: String,
    width: f64,
    samples: usize,
    steps: usize,
    batch: usize,
    milestones: Vec<usize>,
    initial_loss: f64,
    final_loss: f64,
    final_eval_loss: f64,
}

fn batch_tensor(samples: &[&TrainingSample]) -> Outcome<(Tensor<f32>, Vec<f64>)> {
    let mut pixels = Vec::with_capacity(samples.len() * 3 * CROP_SIZE * CROP_SIZE);
    let mut targets = Vec::new();
    for s in samples {
        pixels.extend(s.image.to_planar_signed());
        targets.extend_from_slice(s.params.as_slice());
    }
    Ok((Tensor::new([samples.len(), 3, CROP_SIZE, CROP_SIZE], pixels)?, targets))
}

fn train(cli: &Cli, streams: &SeedStreams, args: &TrainArgs) -> Outcome {
    let out = required(&cli.out, "out", "train")?;
    let model = load_model(cli, "train")?;
    if args.steps == 0 || args.batch == 0 {
        return Err(Failure::Usage("--steps and --batch must be positive".into()));
    }
    let samples =
        read_annotations(&args.data)?.iter().map(|a| load_sample(&args.data, a)).collect::<Result<Vec<_>, _>>()?;
    let targets: Vec<ParamVector> = samples.iter().map(|s| s.params).collect();
    let (mean, std) = target_statistics(&targets)?;
    let loss_cfg = CombinedLossConfig::new(
        args.lambda1,
        args.lambda2,
        WingConfig::new(args.omega, args.epsilon)?,
        training_weights(&model, &std)?,
    )?;
    let spec = spec_for(&args.net)?;
    let params = init_params::<f32>(&spec, &mut streams.stream("init"))?;
    let mut trainer = Trainer::new(spec, params, &model, loss_cfg, &mean, &std)?;
    let milestones = args.milestones.clone().unwrap_or_else(|| scaled_milestones(args.steps));

    create_dir(out)?;
    let weights_path = cli.weights.clone().unwrap_or_else(|| out.join("weights.dwts"));
    let batch = args.batch.min(samples.len());
    let mut shuffle = streams.stream("shuffle");
    let mut order: Vec<usize> = Vec::new();
    let mut csv = String::from("step,lr,loss\n");
    let mut losses = Vec::with_capacity(args.steps);
    for step in 0..args.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..samples.len()).collect();
            epoch.shuffle(&mut shuffle);
            order.extend(epoch);
        }
        let picked: Vec<&TrainingSample> = order.drain(..batch).map(|i| &samples[i]).collect();
        let (images, targets) = batch_tensor(&picked)?;
        let lr = learning_rate(step, args.lr, &milestones, args.lr_factor);
        match trainer.step(&images, &targets, lr) {
            Ok(loss) => {
                csv += &format!("{step},{},{loss}\n", tidy(lr));
                losses.push(loss);
            }
            Err(e) => {
                write_text(&out.join("loss.csv"), &csv)?;
                write_weights(&weights_path, &trainer.params)?;
                let f = Failure::from(e);
                return Err(match f {
                    Failure::Numeric(e) => Failure::Numeric(
                        e.context(format!("step {step}; last good weights written to {}", weights_path.display())),
                    ),
                    other => other,
                });
            }
        }
    }
    write_text(&out.join("loss.csv"), &csv)?;
    write_weights(&weights_path, &trainer.params)?;

    let mut eval_sum = 0.0;
    let all: Vec<&TrainingSample> = samples.iter().collect();
    for chunk in all.chunks(batch) {
        let (images, targets) = batch_tensor(chunk)?;
        eval_sum += trainer.eval_loss(&images, &targets)? * chunk.len() as f64;
    }
    let summary = TrainSummary {
        variant: args.net.variant.name().into(),
        width: args.net.width,
        samples: samples.len(),
        steps: args.steps,
        batch,
        milestones,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        final_eval_loss: eval_sum / samples.len() as f64,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} steps: loss {:.6} -> {:.6} (eval {:.6})",
        args.steps, summary.initial_loss, summary.final_loss, summary.final_eval_loss
    );
    Ok(())
}

/// Drops the representation noise of repeated decay products so the log
/// shows 0.0004 rather than 0.0004000000000000001.
fn tidy(x: f64) -> f64 {
    format!("{x:.11e}").parse().expect("formatted float parses")
}

/// Input line for `fit`; a missing bbox skips the image.
#[derive(Deserialize)]
struct FitRecord {
    image_path: String,
    bbox: Option<[f64; 4]>,
}

fn load_network(cli: &Cli, net: &NetArgs, command: &str) -> Outcome<(NetworkSpec, ParamStore<f32>)> {
    let path = required(&cli.weights, "weights", command)?;
    let spec = spec_for(net)?;
    let mut params = init_params::<f32>(&spec, &mut SeedStreams::new(0).stream("init"))?;
    params.load(&read_weights(path)?)?;
    Ok((spec, params))
}

fn file_stem(path: &str) -> String {
    Path::new(path).file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn fit(cli: &Cli, data: &Path, net: &NetArgs, render: Option<&Path>) -> Outcome {
    let out = required(&cli.out, "out", "fit")?;
    let model = load_model(cli, "fit")?;
    let (spec, mut params) = load_network(cli, net, "fit")?;
    if let Some(dir) = render {
        create_dir(dir)?;
    }
    let records: Vec<FitRecord> = read_jsonl(data)?;
    let mut predictions = Vec::new();
    for (i, rec) in records.iter().enumerate() {
        let Some(bbox) = rec.bbox else {
            eprintln!("warning: {}:{}: no bbox for {}, skipped", data.display(), i + 1, rec.image_path);
            continue;
        };
        let image = RgbImage::read_ppm(&resolve_image_path(data, &rec.image_path))?;
        let crop = crop_face(&image, bbox)?;
        let x = Tensor::new([1, 3, CROP_SIZE, CROP_SIZE], crop.planar())?;
        let p_crop = predict(&spec, &mut params, &x)?.remove(0);
        let p = p_crop.to_crop_frame(1.0 / crop.scale, [-crop.origin[0] / crop.scale, -crop.origin[1] / crop.scale])?;
        let landmarks = project_landmarks(&model, &p)?;
        if let Some(dir) = render {
            let mut fb = rasterize(&model, &p, image.width(), image.height(), Background::Image(&image))?;
            overlay_landmarks(&mut fb.color, &landmarks, &landmark_visibility(&model, &p)?);
            fb.color.write_ppm(&dir.join(format!("{i:06}_{}.ppm", file_stem(&rec.image_path))))?;
        }
        predictions.push(Prediction { image_path: rec.image_path.clone(), landmarks, params: Some(p.0.to_vec()) });
    }
    write_jsonl(out, &predictions)?;
    Ok(())
}

const CED_STEPS: usize = 100;
const CED_MAX: f64 = 10.0;

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    nme: f64,
    yaw_bins: BinReport,
}

fn eval(cli: &Cli, data: &Path, predictions: &Path) -> Outcome {
    let out = required(&cli.out, "out", "eval")?;
    let truth = read_annotations(data)?;
    let preds: Vec<Prediction> = read_jsonl(predictions)?;
    let index: HashMap<&str, usize> = truth.iter().enumerate().map(|(i, a)| (a.image_path.as_str(), i)).collect();
    let mut used = vec![false; truth.len()];
    let mut samples = Vec::with_capacity(preds.len());
    for (line, p) in preds.iter().enumerate() {
        let &i = index.get(p.image_path.as_str()).ok_or_else(|| {
            Failure::Data(anyhow!("{}:{}: no annotation for {}", predictions.display(), line + 1, p.image_path))
        })?;
        used[i] = true;
        let a = &truth[i];
        samples.push(EvalSample {
            name: a.image_path.clone(),
            gt: a.landmarks.clone(),
            visibility: a.visibility.clone(),
            pred: p.landmarks.clone(),
            d: EvalSample::normalizer(a.bbox),
            yaw_deg: a.yaw_deg,
        });
    }
    let missing = used.iter().filter(|u| !**u).count();
    if missing > 0 {
        eprintln!("warning: {missing} annotated images have no prediction and were not scored");
    }
    let thresholds: Vec<f64> = (0..=CED_STEPS).map(|k| CED_MAX * k as f64 / CED_STEPS as f64).collect();
    let report = EvalReport { samples: samples.len(), nme: nme(&samples)?, yaw_bins: yaw_bin_report(&samples)? };
    let table = report.yaw_bins.to_table("NME(%)");
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    write_text(&out.join("report.txt"), &table)?;
    write_text(&out.join("ced.csv"), &ced_csv(&ced_curve(&samples, &thresholds)?))?;
    print!("{table}");
    Ok(())
}

fn analyze(cli: &Cli, width: f64, input_size: usize) -> Outcome {
    let opts = BuildOptions { width, input_size, dense_concat: true };
    let mut specs = Variant::ALL.iter().map(|&v| build_network(v, &opts)).collect::<Result<Vec<_>, _>>()?;
    specs.extend([resnext50_32x4d(input_size)?, densenet121(input_size)?, mobilenet_v2(input_size)?]);
    let rows = specs.iter().map(ComplexityRow::of).collect::<Result<Vec<_>, _>>()?;
    let table = ComplexityRow::table(&rows);
    if let Some(dir) = &cli.out {
        create_dir(dir)?;
        write_json(&dir.join("analysis.json"), &rows)?;
        write_text(&dir.join("analysis.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn render_annotations(cli: &Cli, data: &Path) -> Outcome {
    let out = required(&cli.out, "out", "render")?;
    let model = load_model(cli, "render")?;
    create_dir(out)?;
    for (i, a) in read_annotations(data)?.iter().enumerate() {
        let params = a
            .params
            .as_ref()
            .ok_or_else(|| Failure::Data(anyhow!("{}:{}: render needs params", data.display(), i + 1)))?;
        let p = ParamVector::from_slice(params)?;
        let image = RgbImage::read_ppm(&resolve_image_path(data, &a.image_path))?;
        let mut fb = rasterize(&model, &p, image.width(), image.height(), Background::Image(&image))?;
        overlay_landmarks(&mut fb.color, &a.landmarks, &a.visibility);
        fb.color.write_ppm(&out.join(format!("{i:06}_{}.ppm", file_stem(&a.image_path))))?;
    }
    Ok(())
}

/// Mean face at the given angles (degrees), centered and spanning 80% of
/// a `size`-pixel square.
fn render_pose(cli: &Cli, [pitch, yaw, roll]: [f64; 3], size: usize) -> Outcome {
    let out = required(&cli.out, "out", "render")?;
    let model = load_model(cli, "render")?;
    if size == 0 {
        return Err(Failure::Usage("--size must be positive".into()));
    }
    let mut pose = EulerPose {
        f: 0.4 * size as f64,
        pitch: pitch.to_radians(),
        yaw: yaw.to_radians(),
        roll: roll.to_radians(),
        t3d: [0.0; 3],
    };
    // centre shift in the camera frame, expressed in the model frame
    let c = size as f64 / 2.0 / pose.f;
    let r = pose.rotation();
    pose.t3d = [0, 1, 2].map(|i| r[(0, i)] * c + r[(1, i)] * c);
    let p = ParamVector::from_parts(&pose, &[0.0; NUM_ID], &[0.0; NUM_EXP])?;
    let fb = rasterize(&model, &p, size, size, Background::Flat([0.0; 3]))?;
    if fb.degenerate > 0 {
        eprintln!("note: {} degenerate triangles skipped", fb.degenerate);
    }
    fb.color.write_ppm(out)?;
    Ok(())
}
