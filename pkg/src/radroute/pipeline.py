"""File-based pipeline stages and the end-to-end reproduction run.

Every stage reads and writes files under a single output directory so the
pipeline is inspectable and resumable; `reproduce` chains all stages and
writes a manifest of output hashes. All randomness derives from the global
seed, so two runs with the same (config, seed) are byte-identical.
"""

import copy
import hashlib
import json
import os

import numpy as np

from . import audio, canvas, dsp, evaluate, formats, fusion, segmentation
from . import simworld
from .canvas import Label
from .errors import ConfigurationError
from .simworld import SimConfig, TerrainClass

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "out",
    "simworld": {
        "grid_size": 256,
        "cell_size": 0.4,
        "path_width": 3.0,
        "gps_sigma": 2.0,
        "gps_rate": 1.0,
        "vo_trans_sigma": 0.01,
        "vo_yaw_sigma": 0.002,
        "vo_yaw_drift_deg_s": 0.5,
        "speckle_on": True,
        "scatterer_density": 2000.0,
        "scan_interval_s": 5.0,
        "speed": 1.0,
        "vo_dt": 0.1,
        "sample_rate": 44100.0,
    },
    "dsp": {
        "frame_len": 441,
        "hop": 441,
        "fft_size": 441,
    },
    "audio": {
        "clips_per_class": 600,
        "recordings_per_class": 5,
        "train_fraction": 0.8,
        "epochs": 2,
        "batch_size": 16,
        "learning_rate": 0.02,
        "representation": "gammatone",
        "trials": 3,
    },
    "fusion": {},
    "canvas": {
        "image_size": 256,
        "metres_per_pixel": 0.4,
        "footprint_radius_m": 0.33,
        "use_negatives": True,
    },
    "segmentation": {
        "depth": 3,
        "base_channels": 8,
        "stage1_steps": 350,
        "stage1_lr": 0.1,
        "stage2_steps": 50,
        "stage2_lr": 0.05,
        "batch_size": 8,
        "crop": 64,
        "crops_per_scan": 120,
        "n_rotations": 5,
        "vote_threshold": 0.6,
        "probability_threshold": 0.5,
        "tile_size": 64,
    },
    "eval": {
        "min_pixel_accuracy": 0.98,
        "min_iou": 0.40,
        "eval_scans_per_world": 5,
    },
}


def resolve_config(user: dict | None) -> dict:
    """Deep-merge user settings over the defaults; unknown keys rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if user is None:
        return cfg
    for key, value in user.items():
        if key not in cfg:
            raise ConfigurationError(f"unknown config key {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be an object")
            for sub, sub_value in value.items():
                if sub not in cfg[key]:
                    raise ConfigurationError(
                        f"unknown config key {key}.{sub}")
                cfg[key][sub] = sub_value
        else:
            cfg[key] = value
    return cfg


def sim_config(cfg: dict, profile: str = "short") -> SimConfig:
    sw = cfg["simworld"]
    return SimConfig(
        seed=cfg["seed"],
        radar_profile=profile,
        grid_size=sw["grid_size"],
        cell_size=sw["cell_size"],
        path_width=sw["path_width"],
        gps_sigma=sw["gps_sigma"],
        gps_rate=sw["gps_rate"],
        vo_trans_sigma=sw["vo_trans_sigma"],
        vo_yaw_sigma=sw["vo_yaw_sigma"],
        vo_yaw_drift=np.deg2rad(sw["vo_yaw_drift_deg_s"]),
        speed=sw["speed"],
        vo_dt=sw["vo_dt"],
        sample_rate=sw["sample_rate"],
        speckle_on=sw["speckle_on"],
        scatterer_density=sw["scatterer_density"],
    )


def stft_config(cfg: dict) -> dsp.StftConfig:
    d = cfg["dsp"]
    return dsp.StftConfig(frame_len=d["frame_len"], hop=d["hop"],
                          fft_size=d["fft_size"])


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------- simulate

WORLD_TAGS = {"train": 11, "eval_short": 12, "eval_long": 13}


def run_simulate(cfg: dict, out: str):
    """Worlds, traverse, sensor streams, and radar scans with ground truth."""
    seed = cfg["seed"]
    _ensure_dir(out)
    worlds = {}
    for name, tag in WORLD_TAGS.items():
        profile = "long" if name == "eval_long" else "short"
        sc = sim_config(cfg, profile)
        world_seed = derive_seed(seed, tag)
        world = simworld.generate_world(world_seed, sc)
        simworld.save_world(world, os.path.join(out, f"world_{name}.json"),
                            os.path.join(out, f"world_{name}.pgm"))
        worlds[name] = (world, sc, world_seed)

    # training traverse + sensors
    world, sc, world_seed = worlds["train"]
    truth = simworld.plan_traverse(world, derive_seed(seed, 21), sc)
    simworld.save_poses_csv(os.path.join(out, "poses_train.csv"), truth)
    vo = simworld.synth_vo(truth, sc, derive_seed(seed, 22))
    gps = simworld.synth_gps(truth, sc, derive_seed(seed, 23))
    formats.write_csv(os.path.join(out, "vo.csv"), "timestamp,dx,dy,dyaw", vo)
    formats.write_csv(os.path.join(out, "gps.csv"), "timestamp,x,y,sigma",
                      gps)

    # radar scans along the traverse
    scan_dir = _ensure_dir(os.path.join(out, "scans_train"))
    scatterers = simworld.scene_scatterers(world, sc, world_seed)
    interval = cfg["simworld"]["scan_interval_s"]
    scan_times = np.arange(truth.timestamps[0] + interval,
                           truth.timestamps[-1], interval)
    for i, t in enumerate(scan_times):
        k = int(np.argmin(np.abs(truth.timestamps - t)))
        scan = simworld.synth_radar(world, truth.poses[k], sc,
                                    derive_seed(seed, 30, i),
                                    scatterers=scatterers,
                                    timestamp=float(truth.timestamps[k]))
        canvas.save_polar_scan(
            os.path.join(scan_dir, f"scan_{i:03d}.rds"), scan)

    # traverse audio stream: one synthetic 0.5 s window per audio period
    sr = sc.sample_rate
    n_windows = int(truth.timestamps[-1] / audio.CLIP_LEN_S)
    pieces = []
    for i in range(n_windows):
        t_mid = (i + 0.5) * audio.CLIP_LEN_S
        k = int(np.argmin(np.abs(truth.timestamps - t_mid)))
        terrain = TerrainClass(int(truth.terrain_at_pose[k]))
        clip = simworld.synth_audio(terrain, audio.CLIP_LEN_S, sr,
                                    derive_seed(seed, 40, i))
        pieces.append(clip.samples)
    formats.write_wav(os.path.join(out, "traverse_audio.wav"),
                      np.concatenate(pieces), sr)

    # per-terrain recordings for classifier training
    audio_dir = _ensure_dir(os.path.join(out, "audio"))
    clips_per_class = cfg["audio"]["clips_per_class"]
    recordings = cfg["audio"]["recordings_per_class"]
    windows_per_rec = int(np.ceil(clips_per_class / recordings))
    for terrain in TerrainClass:
        for r in range(recordings):
            clip = simworld.synth_audio(
                terrain, windows_per_rec * audio.CLIP_LEN_S, sr,
                derive_seed(seed, 50, int(terrain), r))
            formats.write_wav(
                os.path.join(audio_dir,
                             f"{terrain.name.lower()}_{r:02d}.wav"),
                clip.samples, sr)

    # held-out evaluation scans at ground-truth poses
    for name in ("eval_short", "eval_long"):
        world, sc, world_seed = worlds[name]
        truth_e = simworld.plan_traverse(world, derive_seed(seed, 24), sc)
        scatt = simworld.scene_scatterers(world, sc, world_seed)
        n_eval = cfg["eval"]["eval_scans_per_world"]
        idx = np.linspace(0, len(truth_e.poses) - 1, n_eval).astype(int)
        sdir = _ensure_dir(os.path.join(out, f"scans_{name}"))
        for i, k in enumerate(idx):
            scan = simworld.synth_radar(world, truth_e.poses[k], sc,
                                        derive_seed(seed, 31, i),
                                        scatterers=scatt,
                                        timestamp=float(truth_e.timestamps[k]))
            canvas.save_polar_scan(os.path.join(sdir, f"scan_{i:03d}.rds"),
                                   scan)


# ------------------------------------------------------------------- audio


def _load_class_clips(out: str, sample_rate: float) -> dict:
    audio_dir = os.path.join(out, "audio")
    clips = {t: [] for t in TerrainClass}
    for terrain in TerrainClass:
        prefix = terrain.name.lower()
        for fname in sorted(os.listdir(audio_dir)):
            if fname.startswith(prefix) and fname.endswith(".wav"):
                samples, rate = formats.read_wav(
                    os.path.join(audio_dir, fname))
                clips[terrain].append(dsp.AudioClip(samples, rate))
    return clips


def _split_dataset(dataset: audio.AudioDataset, train_fraction: float,
                   seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5011]))
    n = len(dataset)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    tr, te = order[:n_train], order[n_train:]
    train = audio.AudioDataset(images=dataset.images[tr],
                               labels=dataset.labels[tr],
                               representation=dataset.representation)
    test = audio.AudioDataset(images=dataset.images[te],
                              labels=dataset.labels[te],
                              representation=dataset.representation)
    return train, test


def run_train_audio(cfg: dict, out: str):
    """Train per-representation classifiers, emit the comparison table,
    and save the final (gammatone by default) model."""
    acfg = cfg["audio"]
    seed = cfg["seed"]
    clips = _load_class_clips(out, cfg["simworld"]["sample_rate"])
    accuracies = {rep: [] for rep in audio.REPRESENTATIONS}
    final_model = None
    final_shape = None
    for rep in audio.REPRESENTATIONS:
        dataset = audio.build_dataset(clips, rep, seed=derive_seed(seed, 60))
        for trial in range(acfg["trials"]):
            train, test = _split_dataset(dataset, acfg["train_fraction"],
                                         derive_seed(seed, 61, trial))
            tcfg = audio.TrainConfig(learning_rate=acfg["learning_rate"],
                                     batch_size=acfg["batch_size"],
                                     epochs=acfg["epochs"],
                                     seed=derive_seed(seed, 62, trial))
            model, _ = audio.train_classifier(train, tcfg)
            acc = audio.evaluate(model, test)["accuracy"]
            accuracies[rep].append(acc)
            if rep == acfg["representation"] and trial == 0:
                final_model = model
                final_shape = train.images.shape[1:]
    rows = [(f"Trial {i + 1}",
             [100.0 * accuracies[rep][i] for rep in audio.REPRESENTATIONS])
            for i in range(acfg["trials"])]
    columns = ["Spectrogram", "Mel-frequency Spectrogram", "Gammatonegram"]
    with open(os.path.join(out, "audio_table.txt"), "w") as f:
        f.write(evaluate.compare_table(columns, rows))
    with open(os.path.join(out, "audio_table.csv"), "w") as f:
        f.write(evaluate.compare_csv(columns, rows))
    report = {rep: {"accuracies": accuracies[rep],
                    "mean": float(np.mean(accuracies[rep]))}
              for rep in audio.REPRESENTATIONS}
    with open(os.path.join(out, "audio_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    audio.save_model(os.path.join(out, "audio_model.kowt"),
                     os.path.join(out, "audio_model.json"),
                     final_model, acfg["representation"], final_shape)
    return report


def _load_audio_model(cfg: dict, out: str):
    with open(os.path.join(out, "audio_model.json")) as f:
        header = json.load(f)
    model = audio.build_model(tuple(header["input_shape"]))
    audio.load_model_weights(os.path.join(out, "audio_model.kowt"), model)
    return model, header["representation"]


def run_eval_audio(cfg: dict, out: str):
    """Classify the traverse stream and score it against ground truth."""
    model, rep = _load_audio_model(cfg, out)
    samples, rate = formats.read_wav(os.path.join(out, "traverse_audio.wav"))
    stream = dsp.AudioClip(samples, rate)
    predictions = audio.classify_stream(model, stream, rep)
    audio.predictions_csv(os.path.join(out, "predictions.csv"), predictions)

    truth = simworld.load_poses_csv(os.path.join(out, "poses_train.csv"))
    correct = 0
    for p in predictions:
        k = int(np.argmin(np.abs(truth.timestamps - p.timestamp)))
        correct += int(p.terrain == int(truth.terrain_at_pose[k]))
    accuracy = correct / len(predictions)
    report = {"stream_accuracy": accuracy, "n_predictions": len(predictions)}
    with open(os.path.join(out, "stream_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


# ------------------------------------------------------------------ fusion


def run_fuse(cfg: dict, out: str):
    vo = formats.read_csv(os.path.join(out, "vo.csv"))
    gps = formats.read_csv(os.path.join(out, "gps.csv"))
    truth = simworld.load_poses_csv(os.path.join(out, "poses_train.csv"))
    sw = cfg["simworld"]
    q = fusion.default_process_noise(sw["vo_trans_sigma"],
                                     sw["vo_yaw_sigma"])
    fused = fusion.fuse(vo, gps, truth.poses[0], q=q,
                        yaw_drift_rate=np.deg2rad(sw["vo_yaw_drift_deg_s"]))
    formats.write_csv(os.path.join(out, "fused.csv"), "timestamp,x,y,yaw",
                      fused)
    return fused


# ------------------------------------------------------------------- paint


def _load_scans(out: str, subdir: str):
    sdir = os.path.join(out, subdir)
    return [canvas.load_polar_scan(os.path.join(sdir, f))
            for f in sorted(os.listdir(sdir)) if f.endswith(".rds")]


def run_paint(cfg: dict, out: str):
    """Label the fused trajectory and paint per-scan supervision masks."""
    ccfg = cfg["canvas"]
    fused = formats.read_csv(os.path.join(out, "fused.csv"))
    predictions = _read_predictions(os.path.join(out, "predictions.csv"))
    lt = fusion.label_trajectory(fused, predictions)
    fusion.save_labeled_trajectory_csv(
        os.path.join(out, "labeled_trajectory.csv"), lt)

    scans = _load_scans(out, "scans_train")
    mask_dir = _ensure_dir(os.path.join(out, "masks_initial"))
    fused_t = fused[:, 0]
    for i, scan in enumerate(scans):
        k = int(np.argmin(np.abs(fused_t - scan.timestamp)))
        est_pose = fused[k, 1:4]
        cart = canvas.polar_to_cartesian(scan, ccfg["image_size"],
                                         ccfg["metres_per_pixel"])
        cart.pose = np.asarray(est_pose)  # painting uses the fused estimate
        mask = canvas.paint_labels(cart, lt, ccfg["footprint_radius_m"],
                                   use_negatives=ccfg["use_negatives"])
        formats.write_pgm(os.path.join(mask_dir, f"mask_{i:03d}.pgm"),
                          canvas.mask_to_pgm_values(mask))
    return lt


def _read_predictions(path):
    preds = []
    with open(path) as f:
        next(f)
        for line in f:
            t, name, pg, pv, pa = line.strip().split(",")
            probs = np.array([float(pg), float(pv), float(pa)])
            preds.append(audio.TerrainPrediction(
                terrain=int(simworld.TERRAIN_BY_NAME[name]),
                probabilities=probs, timestamp=float(t)))
    return preds


# ------------------------------------------------------------ segmentation


def _prepared_train_images(cfg: dict, out: str):
    ccfg = cfg["canvas"]
    scans = _load_scans(out, "scans_train")
    images, max_ranges = [], []
    for scan in scans:
        cart = canvas.polar_to_cartesian(scan, ccfg["image_size"],
                                         ccfg["metres_per_pixel"])
        images.append(segmentation.prepare_scan_image(cart.image))
        max_ranges.append(cart.max_range)
    return scans, images, max_ranges


def _load_masks(out: str, subdir: str):
    mdir = os.path.join(out, subdir)
    return [canvas.mask_from_pgm_values(
        formats.read_pgm(os.path.join(mdir, f)))
        for f in sorted(os.listdir(mdir)) if f.endswith(".pgm")]


def run_train_seg(cfg: dict, out: str, stage: int):
    scfg = cfg["segmentation"]
    seed = cfg["seed"]
    _, images, _ = _prepared_train_images(cfg, out)
    if stage == 1:
        masks = _load_masks(out, "masks_initial")
        model = segmentation.UNet(depth=scfg["depth"],
                                  base_channels=scfg["base_channels"],
                                  seed=derive_seed(seed, 70))
        tcfg = segmentation.SegTrainConfig(
            learning_rate=scfg["stage1_lr"], batch_size=scfg["batch_size"],
            steps=scfg["stage1_steps"], seed=derive_seed(seed, 71))
        model, log = segmentation.stage1_train(
            images, masks, model=model, cfg=tcfg, crop=scfg["crop"],
            crops_per_scan=scfg["crops_per_scan"])
        segmentation.save_unet(os.path.join(out, "seg_stage1.kowt"),
                               os.path.join(out, "seg_stage1.json"), model)
    elif stage == 2:
        masks = _load_masks(out, "masks_propagated")
        model = segmentation.load_unet(os.path.join(out, "seg_stage1.kowt"),
                                       os.path.join(out, "seg_stage1.json"))
        tcfg = segmentation.SegTrainConfig(
            learning_rate=scfg["stage2_lr"], batch_size=1,
            steps=scfg["stage2_steps"], seed=derive_seed(seed, 72))
        model, log = segmentation.stage2_finetune(model, images, masks, tcfg)
        segmentation.save_unet(os.path.join(out, "seg_stage2.kowt"),
                               os.path.join(out, "seg_stage2.json"), model)
    else:
        raise ConfigurationError("stage must be 1 or 2")
    with open(os.path.join(out, f"seg_stage{stage}_log.json"), "w") as f:
        json.dump({"losses": log.losses,
                   "skipped_batches": log.skipped_batches}, f)
        f.write("\n")
    return model


def run_propagate(cfg: dict, out: str):
    """Densify the initial masks with the stage-1 model and report how the
    untraversed side path was recovered."""
    scfg = cfg["segmentation"]
    ccfg = cfg["canvas"]
    model = segmentation.load_unet(os.path.join(out, "seg_stage1.kowt"),
                                   os.path.join(out, "seg_stage1.json"))
    scans, images, max_ranges = _prepared_train_images(cfg, out)
    masks = _load_masks(out, "masks_initial")
    pcfg = segmentation.PropagationConfig(
        tile_size=scfg["tile_size"], n_rotations=scfg["n_rotations"],
        vote_threshold=scfg["vote_threshold"],
        probability_threshold=scfg["probability_threshold"],
        seed=derive_seed(cfg["seed"], 80))
    world = simworld.load_world(os.path.join(out, "world_train.json"))
    prop_dir = _ensure_dir(os.path.join(out, "masks_propagated"))
    model = segmentation.UNetInference(model)

    side_total = side_hit = grass_total = grass_fp = 0
    for i, (scan, image, mask) in enumerate(zip(scans, images, masks)):
        in_range = ~canvas.range_ignore_mask(
            ccfg["image_size"], ccfg["metres_per_pixel"], max_ranges[i])
        prop = segmentation.propagate_labels(model, image, mask, pcfg,
                                             valid_region=in_range)
        formats.write_pgm(os.path.join(prop_dir, f"mask_{i:03d}.pgm"),
                          canvas.mask_to_pgm_values(prop))
        # generalisation bookkeeping, ground truth at the true scan pose
        gt = simworld.ground_truth_mask(world, scan.pose, ccfg["image_size"],
                                        ccfg["metres_per_pixel"])
        region = simworld.untraversed_region_mask(
            world, scan.pose, ccfg["image_size"], ccfg["metres_per_pixel"])
        newly = (mask == int(Label.UNLABELED)) & in_range
        side_pixels = region & (gt == 1) & newly
        side_total += int(side_pixels.sum())
        side_hit += int((prop[side_pixels] == int(Label.PATH)).sum())
        grass_pixels = (gt == 0) & newly
        grass_total += int(grass_pixels.sum())
        grass_fp += int((prop[grass_pixels] == int(Label.PATH)).sum())
    report = {
        "side_path_pixels": side_total,
        "side_path_recall": side_hit / side_total if side_total else 0.0,
        "grass_pixels": grass_total,
        "grass_false_positive_rate":
            grass_fp / grass_total if grass_total else 0.0,
    }
    with open(os.path.join(out, "propagation_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


def run_segment(cfg: dict, out: str, scans_subdir: str = "scans_eval_short",
                model_name: str = "seg_stage2"):
    ccfg = cfg["canvas"]
    model = segmentation.load_unet(os.path.join(out, f"{model_name}.kowt"),
                                   os.path.join(out, f"{model_name}.json"))
    scans = _load_scans(out, scans_subdir)
    pred_dir = _ensure_dir(os.path.join(out, f"pred_{scans_subdir}"))
    model = segmentation.UNetInference(model)
    for i, scan in enumerate(scans):
        cart = canvas.polar_to_cartesian(scan, ccfg["image_size"],
                                         ccfg["metres_per_pixel"])
        image = segmentation.prepare_scan_image(cart.image)
        pred = segmentation.segment(model, image)
        formats.write_pgm(os.path.join(pred_dir, f"pred_{i:03d}.pgm"),
                          (pred * 255).astype(np.uint8))


def run_eval_seg(cfg: dict, out: str) -> dict:
    """Score predictions on both held-out worlds; exit gate data returned."""
    ccfg = cfg["canvas"]
    results = {}
    for name in ("eval_short", "eval_long"):
        world = simworld.load_world(os.path.join(out, f"world_{name}.json"))
        scans = _load_scans(out, f"scans_{name}")
        pred_dir = os.path.join(out, f"pred_scans_{name}")
        preds, gts, ignores = [], [], []
        for i, scan in enumerate(scans):
            pred = formats.read_pgm(
                os.path.join(pred_dir, f"pred_{i:03d}.pgm")) > 127
            gt = simworld.ground_truth_mask(world, scan.pose,
                                            ccfg["image_size"],
                                            ccfg["metres_per_pixel"])
            ignore = canvas.range_ignore_mask(ccfg["image_size"],
                                              ccfg["metres_per_pixel"],
                                              scan.max_range)
            preds.append(pred)
            gts.append(gt)
            ignores.append(ignore)
        pred = np.stack(preds)
        gt = np.stack(gts)
        ignore = np.stack(ignores)
        s = evaluate.scores(pred, gt, ignore)
        results[name] = {"pixel_accuracy": s.pixel_accuracy, "iou": s.iou}
    with open(os.path.join(out, "seg_scores.json"), "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    return results


def run_render(cfg: dict, out: str):
    """Fig-style triptych: scan + initial labels, propagated labels, and
    final segmentation, as red/green tinted PPM overlays."""
    ccfg = cfg["canvas"]
    scans, images, _ = _prepared_train_images(cfg, out)
    initial = _load_masks(out, "masks_initial")
    propagated = _load_masks(out, "masks_propagated")
    model = segmentation.load_unet(os.path.join(out, "seg_stage2.kowt"),
                                   os.path.join(out, "seg_stage2.json"))
    render_dir = _ensure_dir(os.path.join(out, "render"))
    mid = len(scans) // 2
    seg = segmentation.segment(model, images[mid])
    seg_mask = np.where(seg > 0, int(Label.PATH),
                        int(Label.NOT_PATH)).astype(np.uint8)
    for name, mask in (("initial", initial[mid]),
                       ("propagated", propagated[mid]),
                       ("segmentation", seg_mask)):
        ppm = render_overlay(images[mid], mask)
        formats.write_ppm(os.path.join(render_dir, f"{name}.ppm"), ppm)


def render_overlay(scan_image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Grayscale scan with path pixels tinted red and not-path green."""
    lo, hi = scan_image.min(), scan_image.max()
    gray = ((scan_image - lo) / max(hi - lo, 1e-12) * 255.0).astype(np.uint8)
    rgb = np.stack([gray, gray, gray], axis=-1).astype(np.int64)
    path = mask == int(Label.PATH)
    not_path = mask == int(Label.NOT_PATH)
    rgb[path, 0] = np.minimum(rgb[path, 0] + 120, 255)
    rgb[not_path, 1] = np.minimum(rgb[not_path, 1] + 120, 255)
    return rgb.astype(np.uint8)


# --------------------------------------------------------------- reproduce


def write_manifest(out: str):
    """Hashes of every output file, keyed by path relative to the run dir."""
    entries = {}
    for root, _, files in os.walk(out):
        for fname in sorted(files):
            if fname == "manifest.json":
                continue
            path = os.path.join(root, fname)
            rel = os.path.relpath(path, out)
            with open(path, "rb") as f:
                digest = hashlib.sha256(f.read()).hexdigest()
            entries[rel.replace(os.sep, "/")] = digest
    with open(os.path.join(out, "manifest.json"), "w") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")
    return entries


def write_resolved_config(cfg: dict, out: str):
    """Record the fully-resolved settings next to the outputs.

    The output directory itself is omitted so identical runs into
    different directories produce byte-identical files.
    """
    recorded = {k: v for k, v in cfg.items() if k != "output_dir"}
    with open(os.path.join(out, "config.json"), "w") as f:
        json.dump(recorded, f, indent=2, sort_keys=True)
        f.write("\n")


def run_reproduce(cfg: dict, out: str):
    """The full pipeline, end to end, into one output directory."""
    _ensure_dir(out)
    write_resolved_config(cfg, out)
    run_simulate(cfg, out)
    run_train_audio(cfg, out)
    run_eval_audio(cfg, out)
    run_fuse(cfg, out)
    run_paint(cfg, out)
    run_train_seg(cfg, out, stage=1)
    run_propagate(cfg, out)
    run_train_seg(cfg, out, stage=2)
    run_segment(cfg, out, "scans_eval_short")
    run_segment(cfg, out, "scans_eval_long")
    results = run_eval_seg(cfg, out)
    run_render(cfg, out)
    write_manifest(out)
    return results
