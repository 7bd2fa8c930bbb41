"""Experiment runner: builds the dataset and simulation context from a
RunConfig, drives the episode loop, evaluates detection quality, and writes
the metrics CSVs, the report, and the model checkpoints.

Every random draw goes through a named stream keyed by the run seed, so
identical (config, seed) pairs produce byte-identical output files.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from . import dataset, detector, nn, scheduler
from .config import RunConfig
from .rng import stream

SLOT_FIELDS = [
    "episode", "slot", "reward", "system_cost", "coverage_sum", "time_cost",
    "round_time", "ld", "lg", "selection_mask", "assoc_counts",
    "aggregation_latency", "mean_update_latency", "mean_upload_latency",
    "mean_distribution_latency",
]

EPISODE_FIELDS = [
    "episode", "mean_reward", "discounted_return", "precision", "recall", "f1",
    "threshold",
]


class DatasetMissingError(FileNotFoundError):
    pass


@dataclass
class ExperimentResult:
    slots_csv: str
    episodes_csv: str
    report: str
    summary: dict
    out_dir: str | None


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def build_device_rows(cfg: RunConfig) -> list[np.ndarray]:
    """Raw per-device feature rows, time-ordered, synthetic or parsed."""
    k = cfg.world.n_devices
    if cfg.run.dataset == "synthetic":
        records = dataset.synthesize(cfg.data.synthetic_records, k,
                                     stream(cfg.run.seed, "synth"))
        per_device: list[list[dataset.SensorRecord]] = [[] for _ in range(k)]
        for rec in records:
            per_device[(rec.mote_id - 1) % k].append(rec)
    else:
        if not os.path.exists(cfg.run.dataset):
            raise DatasetMissingError(f"dataset not found: {cfg.run.dataset}")
        records = _load_trace_cached(cfg.run.dataset)
        if not records:
            raise DatasetMissingError(f"dataset is empty: {cfg.run.dataset}")
        per_device = dataset.assign_motes_to_devices(records, k,
                                                     stream(cfg.run.seed, "mote-assign"))
    return [dataset.records_to_rows(rows) for rows in per_device]


def _load_trace_cached(path: str) -> list[dataset.SensorRecord]:
    """Parse the trace, keeping a binary sidecar cache to skip re-parsing."""
    cache = path + ".afcache"
    if os.path.exists(cache) and os.path.getmtime(cache) >= os.path.getmtime(path):
        try:
            return dataset.read_record_cache(cache)
        except ValueError:
            pass
    records = dataset.read_trace(path).records
    try:
        dataset.write_record_cache(cache, records)
    except OSError:
        pass  # read-only dataset locations are fine
    return records


@dataclass
class DataContext:
    device_streams: list[dataset.DeviceStream]
    validation: np.ndarray
    test_rows: np.ndarray
    test_labels: np.ndarray
    train_pool: np.ndarray
    normalizer: dataset.Normalizer


def build_data_context(cfg: RunConfig) -> DataContext:
    """Per-device chronological split; train rows feed the sensing streams,
    validation and test rows are pooled.  Normalization is fit on the
    pooled train rows and applied everywhere."""
    device_rows = build_device_rows(cfg)
    ratios = (cfg.data.train_ratio, cfg.data.validation_ratio, cfg.data.test_ratio)
    train_parts, val_parts, test_parts = [], [], []
    for rows in device_rows:
        n = rows.shape[0]
        n_train = int(round(ratios[0] * n))
        n_val = int(round(ratios[1] * n))
        train_parts.append(rows[:n_train])
        val_parts.append(rows[n_train : n_train + n_val])
        test_parts.append(rows[n_train + n_val :])
    train_pool = np.vstack([p for p in train_parts if p.size]) if train_parts else np.zeros((0, 4))
    if train_pool.shape[0] < cfg.training.batch_size:
        raise DatasetMissingError("dataset too small for the configured batch size")
    norm = dataset.Normalizer.fit(train_pool)
    streams = [dataset.DeviceStream(norm.normalize(p) if p.size else p)
               for p in train_parts]
    validation = norm.normalize(np.vstack([p for p in val_parts if p.size]))
    test_pool = norm.normalize(np.vstack([p for p in test_parts if p.size]))
    test_rows, test_labels = dataset.inject_anomalies(
        test_pool, cfg.detection.test_anomaly_fraction,
        cfg.detection.test_anomaly_magnitude, stream(cfg.run.seed, "test-inject"))
    return DataContext(streams, validation, test_rows, test_labels,
                       norm.normalize(train_pool), norm)


def build_sim_context(cfg: RunConfig, data: DataContext) -> scheduler.SimContext:
    codec = cfg.codec()
    seed = cfg.run.seed
    buffers = [dataset.RingBuffer(cfg.data.buffer_capacity)
               for _ in range(codec.n_uavs)]
    for uav in range(codec.n_uavs):
        if cfg.data.warm_start_samples > 0:
            rng = stream(seed, "warm-start", uav)
            idx = rng.integers(0, data.train_pool.shape[0],
                               size=cfg.data.warm_start_samples)
            for i in idx:
                buffers[uav].append(data.train_pool[i])
    models = [detector.new_gan(dataset.N_FEATURES, cfg.training.latent_dim,
                               cfg.training.gan_hidden, stream(seed, "gan-init", i))
              for i in range(codec.n_uavs)]
    eval_batches = []
    for uav in range(codec.n_uavs):
        rng = stream(seed, "eval-batch", uav)
        idx = rng.integers(0, data.validation.shape[0], size=cfg.data.eval_batch_size)
        eval_batches.append(data.validation[idx])
    return scheduler.SimContext(
        codec=codec,
        sensing=cfg.sensing_config(),
        channel=cfg.channel_config(),
        energy=cfg.energy_config(),
        compute=cfg.compute_config(),
        train_cfg=cfg.train_config(),
        dp_cfg=cfg.dp_config(),
        rl_cfg=cfg.rl_config(),
        device_streams=data.device_streams,
        buffers=buffers,
        models=models,
        eval_batches=eval_batches,
        seed=seed,
        episode_slots=cfg.run.slots,
        slot_duration=cfg.world.slot_duration,
        mobility=cfg.world.mobility,
        latency_dataset_cap=cfg.data.latency_dataset_cap,
    )


def evaluate_detection(cfg: RunConfig, ctx: scheduler.SimContext, data: DataContext,
                       episode: int) -> tuple[detector.MetricsReport, float]:
    """Calibrate a threshold on the validation pool and score the labeled
    test rows.  Aggregating algorithms share one global model; standalone
    averages the per-UAV reports."""
    det = cfg.detection
    models = ctx.models if cfg.run.algo == "standalone" else ctx.models[:1]
    reports, thresholds = [], []
    for i, gan in enumerate(models):
        model = detector.AnomalyModel(gan, threshold=0.0,
                                      score_weight=det.score_weight,
                                      latent_search_count=det.latent_search_count)
        cal_rng = stream(ctx.seed, "calibrate", episode, i)
        model.threshold = detector.calibrate_threshold(
            model, data.validation, det.calibration_fraction,
            det.calibration_magnitude, cal_rng)
        score_rng = stream(ctx.seed, "score", episode, i)
        reports.append(detector.evaluate(model, data.test_rows, data.test_labels,
                                         score_rng))
        thresholds.append(model.threshold)
    if len(reports) == 1:
        return reports[0], thresholds[0]
    mean = lambda attr: float(np.mean([getattr(r, attr) for r in reports]))
    merged = detector.MetricsReport(
        precision=mean("precision"), recall=mean("recall"), f1=mean("f1"),
        true_pos=sum(r.true_pos for r in reports),
        false_pos=sum(r.false_pos for r in reports),
        false_neg=sum(r.false_neg for r in reports),
        true_neg=sum(r.true_neg for r in reports),
    )
    return merged, float(np.mean(thresholds))


def _slot_row_to_csv(row: scheduler.SlotRecord, n_uavs: int) -> dict:
    out = {
        "episode": row.episode, "slot": row.slot, "reward": _fmt(row.reward),
        "system_cost": _fmt(row.system_cost), "coverage_sum": row.coverage_sum,
        "time_cost": _fmt(row.time_cost), "round_time": _fmt(row.round_time),
        "ld": _fmt(row.ld), "lg": _fmt(row.lg),
        "selection_mask": row.selection_mask,
        "assoc_counts": "|".join(str(int(c)) for c in row.assoc_counts),
        "aggregation_latency": _fmt(row.aggregation_latency),
        "mean_update_latency": _fmt(row.mean_update_latency),
        "mean_upload_latency": _fmt(row.mean_upload_latency),
        "mean_distribution_latency": _fmt(row.mean_distribution_latency),
    }
    for n in range(n_uavs):
        out[f"prop_energy_{n}"] = _fmt(row.prop_energy[n])
        out[f"comp_energy_{n}"] = _fmt(row.comp_energy[n])
        out[f"tx_energy_{n}"] = _fmt(row.tx_energy[n])
    return out


def slots_csv_text(rows: list[scheduler.SlotRecord], n_uavs: int) -> str:
    # per-UAV energy triplet columns: prop, comp, tx grouped by UAV
    fields = SLOT_FIELDS + [f"{kind}_energy_{n}" for n in range(n_uavs)
                            for kind in ("prop", "comp", "tx")]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(_slot_row_to_csv(row, n_uavs))
    return buf.getvalue()


def episodes_csv_text(rows: list[dict], n_uavs: int) -> str:
    fields = EPISODE_FIELDS + [f"total_energy_{n}" for n in range(n_uavs)]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def emit_report(slot_rows: list[scheduler.SlotRecord], episode_rows: list[dict],
                n_uavs: int) -> str:
    """Machine-readable run summary (key = value lines).

    The per-slot one-round execution time is the max of the selected UAVs'
    component sums; mean_execution_time averages it over every slot of the
    run and max_execution_time takes the largest slot.
    """
    if not slot_rows or not episode_rows:
        raise ValueError("no metrics to report")
    round_times = np.array([r.round_time for r in slot_rows])
    time_costs = np.array([r.time_cost for r in slot_rows])
    per_uav_energy = np.stack([
        np.array([float(row[f"total_energy_{n}"]) for n in range(n_uavs)])
        for row in episode_rows
    ])
    mean_energy = per_uav_energy.mean(axis=0)
    last = episode_rows[-1]
    lines = [
        f"episodes = {len(episode_rows)}",
        f"slots_per_episode = {len(slot_rows) // len(episode_rows)}",
        f"final_precision = {last['precision']}",
        f"final_recall = {last['recall']}",
        f"final_f1 = {last['f1']}",
        f"mean_execution_time = {_fmt(round_times.mean())}",
        f"max_execution_time = {_fmt(round_times.max())}",
        f"mean_time_cost = {_fmt(time_costs.mean())}",
    ]
    for n in range(n_uavs):
        lines.append(f"mean_energy_uav_{n} = {_fmt(mean_energy[n])}")
    lines.append(f"mean_energy_all_uavs = {_fmt(mean_energy.mean())}")
    rewards = ",".join(str(row["mean_reward"]) for row in episode_rows)
    lines.append(f"reward_curve = {rewards}")
    return "\n".join(lines) + "\n"


def write_checkpoints(cfg: RunConfig, ctx: scheduler.SimContext,
                      policy: scheduler.Policy, threshold: float,
                      out_dir: str) -> None:
    det = cfg.detection
    if cfg.run.algo == "standalone":
        for i, gan in enumerate(ctx.models):
            nn.save_params(os.path.join(out_dir, f"generator_uav{i}.pv"), gan.theta)
            nn.save_params(os.path.join(out_dir, f"discriminator_uav{i}.pv"), gan.w)
        ref = ctx.models[0]
    else:
        ref = ctx.models[0]
        nn.save_params(os.path.join(out_dir, "generator.pv"), ref.theta)
        nn.save_params(os.path.join(out_dir, "discriminator.pv"), ref.w)
    meta = [
        f"gen_widths = {','.join(str(w) for w in ref.gen_spec.layer_widths)}",
        f"disc_widths = {','.join(str(w) for w in ref.disc_spec.layer_widths)}",
        f"latent_dim = {ref.latent_dim}",
        f"threshold = {repr(threshold)}",
        f"score_weight = {repr(det.score_weight)}",
        f"latent_search_count = {det.latent_search_count}",
    ]
    with open(os.path.join(out_dir, "model.meta"), "w") as fh:
        fh.write("\n".join(meta) + "\n")
    if isinstance(policy, scheduler.Ca2cPolicy):
        nets = policy.nets
        nn.save_params(os.path.join(out_dir, "actor.pv"), nets.actor.params)
        nn.save_params(os.path.join(out_dir, "actor_target.pv"), nets.actor.target)
        nn.save_params(os.path.join(out_dir, "critic.pv"), nets.critic.params)
        nn.save_params(os.path.join(out_dir, "critic_target.pv"), nets.critic.target)
    elif isinstance(policy, scheduler.DqnAflPolicy):
        nn.save_params(os.path.join(out_dir, "qnet.pv"), policy.qnet.params)
        nn.save_params(os.path.join(out_dir, "qnet_target.pv"), policy.qnet.target)
    elif isinstance(policy, scheduler.DdpgFlPolicy):
        nn.save_params(os.path.join(out_dir, "actor.pv"), policy.actor.params)
        nn.save_params(os.path.join(out_dir, "actor_target.pv"), policy.actor.target)
        nn.save_params(os.path.join(out_dir, "critic.pv"), policy.critic.params)
        nn.save_params(os.path.join(out_dir, "critic_target.pv"), policy.critic.target)


def run_experiment(cfg: RunConfig, out_dir: str | None = None) -> ExperimentResult:
    """Run the configured experiment end to end.

    Raises DatasetMissingError when the trace is absent and DivergenceError
    when training produces non-finite values; the CLI maps those to exit
    codes 2 and 3.
    """
    cfg.validate()
    data = build_data_context(cfg)
    ctx = build_sim_context(cfg, data)
    policy = scheduler.make_policy(cfg.run.algo, ctx.codec, ctx.rl_cfg,
                                   stream(cfg.run.seed, "policy-init"))

    slot_rows: list[scheduler.SlotRecord] = []
    episode_rows: list[dict] = []
    threshold = 0.0
    for episode in range(cfg.run.episodes):
        result = scheduler.run_episode(ctx, policy, episode)
        slot_rows.extend(result.rows)
        report, threshold = evaluate_detection(cfg, ctx, data, episode)
        row = {
            "episode": episode,
            "mean_reward": _fmt(result.mean_reward),
            "discounted_return": _fmt(result.discounted_return),
            "precision": _fmt(report.precision),
            "recall": _fmt(report.recall),
            "f1": _fmt(report.f1),
            "threshold": _fmt(threshold),
        }
        for n in range(ctx.codec.n_uavs):
            row[f"total_energy_{n}"] = _fmt(result.total_energy[n])
        episode_rows.append(row)

    slots_text = slots_csv_text(slot_rows, ctx.codec.n_uavs)
    episodes_text = episodes_csv_text(episode_rows, ctx.codec.n_uavs)
    report_text = (emit_report(slot_rows, episode_rows, ctx.codec.n_uavs)
                   if episode_rows else "")

    summary = {
        "algo": cfg.run.algo,
        "episodes": cfg.run.episodes,
        "slots": cfg.run.slots,
        "seed": cfg.run.seed,
        "final_f1": float(episode_rows[-1]["f1"]) if episode_rows else None,
        "mean_reward_last_episode": (float(episode_rows[-1]["mean_reward"])
                                     if episode_rows else None),
    }

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "metrics_slots.csv"), "w") as fh:
            fh.write(slots_text)
        with open(os.path.join(out_dir, "metrics_episodes.csv"), "w") as fh:
            fh.write(episodes_text)
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(report_text)
        if cfg.run.episodes > 0:
            write_checkpoints(cfg, ctx, policy, threshold, out_dir)
    return ExperimentResult(slots_text, episodes_text, report_text, summary, out_dir)
