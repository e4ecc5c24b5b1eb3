"""Experiment runs: config files, training loop, metrics CSV and checkpoints."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tasks
from .errors import ConfigError, DataFormatError, MismatchError, NonFiniteLossError
from .model import CGENN, ModelConfig, TrainConfig, TrainState, activate_metric, evaluate, new_state, train_step

CHECKPOINT_FORMAT = "metric-cgenn-checkpoint/1"
CSV_HEADER = ["step", "train_loss", "eval_loss", "metric_activated", "metric_offdiag_norm"]

_TASK_DEFAULTS = {
    "signed-volume": {
        "dataset": tasks.SignedVolumeDataset,
        "train": {"steps": 5000},
    },
    "nbody": {
        "dataset": tasks.NBodyDataset,
        "train": {"steps": 10000, "metric_activation_fraction": 0.9},
    },
}


def task_model_defaults(task: str) -> dict:
    ds = _TASK_DEFAULTS[task]["dataset"]
    return {
        "dim": ds.dim,
        "q_signature": [1.0] * ds.dim,
        "output_kind": ds.output_kind,
        "input_points": ds.layout["points"],
        "input_scalars": ds.layout["scalars"],
        "input_volumes": ds.layout["volumes"],
        "out_channels": ds.out_channels,
    }


def _pick(cls, data: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {where} field(s): {sorted(unknown)}")
    return data


@dataclass
class RunConfig:
    task: str
    model: ModelConfig
    train: TrainConfig
    train_data: str | None = None
    eval_data: str | None = None
    out_dir: str = "run"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        task = data.pop("task", None)
        if task not in _TASK_DEFAULTS:
            raise ConfigError(f"config needs task in {tasks.TASKS}, got {task!r}")
        model = {**task_model_defaults(task), **_pick(ModelConfig, data.pop("model", {}) or {}, "model")}
        train = {**_TASK_DEFAULTS[task]["train"], **_pick(TrainConfig, data.pop("train", {}) or {}, "train")}
        try:
            cfg = cls(
                task=task,
                model=ModelConfig(**model),
                train=TrainConfig(**train),
                train_data=data.pop("train_data", None),
                eval_data=data.pop("eval_data", None),
                out_dir=data.pop("out_dir", "run"),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        if data:
            raise ConfigError(f"unknown config field(s): {sorted(data)}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "train_data": self.train_data,
            "eval_data": self.eval_data,
            "out_dir": self.out_dir,
        }


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_dataset(path, task: str):
    if not Path(path).exists():
        raise DataFormatError(f"dataset {path} does not exist")
    return tasks.read_jsonl(path, task)


# checkpoints

def _array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": np.asarray(a).tolist()}


def checkpoint_dict(run_cfg: RunConfig, model: CGENN, state: TrainState) -> dict:
    layers = []
    for layer in model.layers:
        weights = {p.name.rsplit(".", 1)[1]: _array(p.value) for p in layer.parameters()}
        prefix = layer.parameters()[0].name.rsplit(".", 1)[0]
        layers.append({"kind": layer.kind, "name": prefix, "weights": weights})
    rng_state = state.rng.bit_generator.state
    return {
        "format": CHECKPOINT_FORMAT,
        "config": run_cfg.to_dict(),
        "step": state.step,
        "metric": {
            "M": model.metric.value.tolist(),
            "epsilon": model.config.epsilon,
            "q_signature": list(model.config.q_signature),
            "activated": state.metric_activated,
            "activation_step": state.activation_step,
        },
        "layers": layers,
        "optimizer": {"name": state.optimizer.name, "state": state.optimizer.state_dict()},
        "rng_state": rng_state,
    }


def save_checkpoint(path, run_cfg: RunConfig, model: CGENN, state: TrainState):
    dump_json(checkpoint_dict(run_cfg, model, state), path)


def load_checkpoint(path):
    """Rebuild ``(run_cfg, model, state)`` from a checkpoint file."""
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if data.get("format") != CHECKPOINT_FORMAT:
        raise DataFormatError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    run_cfg = RunConfig.from_dict(data["config"])
    model = CGENN(run_cfg.model)
    by_name = {p.name: p for p in model.parameters()}
    for layer in data["layers"]:
        for short, arr in layer["weights"].items():
            p = by_name[f"{layer['name']}.{short}"]
            value = np.array(arr["values"], dtype=np.float64).reshape(arr["shape"])
            if value.shape != p.shape:
                raise DataFormatError(f"parameter {p.name} has shape {value.shape}, expected {p.shape}")
            p.value = value
    model.metric.value = np.array(data["metric"]["M"], dtype=np.float64)
    state = new_state(run_cfg.train)
    state.step = data["step"]
    state.metric_activated = bool(data["metric"]["activated"])
    state.activation_step = data["metric"]["activation_step"]
    state.optimizer.load_state_dict(data["optimizer"]["state"])
    state.rng.bit_generator.state = data["rng_state"]
    return run_cfg, model, state


def check_compatible(run_cfg: RunConfig, dataset):
    if dataset.task != run_cfg.task:
        raise MismatchError(f"checkpoint task {run_cfg.task!r} but dataset task {dataset.task!r}")
    if dataset.dim != run_cfg.model.dim:
        raise MismatchError(f"checkpoint dim {run_cfg.model.dim} but dataset dim {dataset.dim}")


# training

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def training_steps(model: CGENN, state: TrainState, tc: TrainConfig, train_ds):
    """Optimisation loop; yields ``(step, pre-update batch loss)`` after each step.

    The metric is activated right before step ``tc.activation_step``, so a
    fraction of 1.0 never activates it.
    """
    n = len(train_ds)
    batch = min(tc.batch_size, n)
    for s in range(state.step, tc.steps):
        if s == tc.activation_step and not state.metric_activated:
            activate_metric(model, state)
        idx = state.rng.choice(n, batch, replace=False)
        yield s, train_step(model, state, train_ds.subset(idx))


def train_run(run_cfg: RunConfig, train_ds, eval_ds=None, out_dir=None, progress=None) -> dict:
    """Train to completion and write artifacts under ``out_dir``.

    Files: ``config.json`` (echo), ``metrics.csv``, ``checkpoint.json`` and
    ``summary.json``. A non-finite loss leaves the partial artifacts plus an
    ``.aborted`` marker and re-raises.
    """
    check_compatible(run_cfg, train_ds)
    if eval_ds is not None:
        check_compatible(run_cfg, eval_ds)
    out = Path(out_dir or run_cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(run_cfg.to_dict(), out / "config.json")

    tc = run_cfg.train
    model = CGENN(run_cfg.model)
    state = new_state(tc)
    act_step = tc.activation_step
    initial = evaluate(model, state, train_ds)["loss"]
    symmetric = True

    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        try:
            for s, loss in training_steps(model, state, tc, train_ds):
                if state.metric_activated and not np.array_equal(model.metric.value, model.metric.value.T):
                    symmetric = False
                if s % tc.log_every == 0 or s == act_step or s == tc.steps - 1:
                    ev = evaluate(model, state, eval_ds)["loss"] if eval_ds is not None else None
                    writer.writerow([s, _fmt(loss), _fmt(ev), int(state.metric_activated),
                                     _fmt(model.metric_matrix().offdiag_norm())])
                    fh.flush()
                    if progress:
                        progress(s, loss, ev)
        except NonFiniteLossError as exc:
            fh.flush()
            save_checkpoint(out / "checkpoint.json", run_cfg, model, state)
            (out / ".aborted").write_text(json.dumps(exc.diagnostics, default=str) + "\n")
            raise

    summary = {
        "task": run_cfg.task,
        "steps": tc.steps,
        "metric_activation_fraction": tc.metric_activation_fraction,
        "activation_step": state.activation_step,
        "metric_activated": state.metric_activated,
        "metric_symmetric_every_step": symmetric,
        "initial_train_loss": initial,
        "final_train_loss": evaluate(model, state, train_ds)["loss"],
        "final_eval_loss": evaluate(model, state, eval_ds)["loss"] if eval_ds is not None else None,
        "metric_M": model.metric.value.tolist(),
    }
    save_checkpoint(out / "checkpoint.json", run_cfg, model, state)
    dump_json(summary, out / "summary.json")
    return summary


def eval_checkpoint(checkpoint_path, data_path) -> dict:
    run_cfg, model, state = load_checkpoint(checkpoint_path)
    dataset = tasks.read_jsonl(data_path)
    check_compatible(run_cfg, dataset)
    res = evaluate(model, state, dataset)
    res["task"] = run_cfg.task
    res["metric_activated"] = state.metric_activated
    return res
