"""Reproducible experiment runner: flat key=value configs with command-line
overrides, the training loop for every method, metrics CSV emission, and
checkpoint/resume.

Given the same config and seed, every artifact a run writes is
byte-identical across runs in the same precision mode. All randomness is
derived from (seed, stream, step-or-epoch) seed sequences, never from
evolving generator state.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, checkpoint as ckpt, data as data_io, metrics as metrics_mod
from .masking import MaskPair, SparsitySpec
from .metrics import ChurnStats, MaskSnapshot, ReservoirTracker, flop_estimate, mask_churn
from .optimizer import (
    AblationSwitches,
    OptimizerState,
    apply_update,
    exploration_grad,
    exploration_loss,
    hash_name,
    lr_schedule,
    masked_view,
    rebuild_masks,
    train_step,
)
from .tensor import NumericError, init_mlp_params, mlp_graph

OUT_DIR_ENV = "TOPKAST_OUT_DIR"

# Seed-stream tags (the optimizer owns stream 1 for random-B sampling).
INIT_STREAM = 2
STATIC_STREAM = 3
SET_STREAM = 4
DATA_STREAM = 5

METRICS_COLUMNS = (
    "step",
    "train_loss",
    "eval_loss",
    "eval_accuracy",
    "churn_min",
    "churn_mean",
    "churn_max",
    "reservoir_frac",
    "fwd_flop_ratio",
    "bwd_flop_ratio",
)


class ConfigError(ValueError):
    """Missing, unknown, or out-of-range configuration value."""


class TrainingDiverged(RuntimeError):
    """Loss was non-finite for too many consecutive steps."""


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s):
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_float_tuple(s):
    return tuple(float(p) for p in s.split(",") if p.strip())


def _parse_str_tuple(s):
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _parse_opt_int(s):
    return None if s.strip().lower() == "none" else int(s)


def _parse_opt_str(s):
    return None if s.strip().lower() == "none" else s.strip()


# key -> parser. Unknown keys in a config file or override are an error.
CONFIG_KEYS = {
    "method": str.strip,
    "dataset": str.strip,
    "out_dir": str.strip,
    "steps": int,
    "batch_size": int,
    "eval_period": int,
    "churn_period": int,
    "checkpoint_period": int,
    "seed": int,
    "precision": int,
    "fwd_sparsity": float,
    "bwd_sparsity": float,
    "refresh_period": int,
    "dense_exempt_layers": _parse_str_tuple,
    "layer_sizes": _parse_int_tuple,
    "lr": float,
    "momentum": float,
    "warmup_frac": float,
    "decay_milestones": _parse_float_tuple,
    "decay_factor": float,
    "reg_coeff": float,
    "reg_exponent": int,
    "b_selection": str.strip,
    "stop_exploration_at_step": _parse_opt_int,
    "zero_momentum_on_mask_change": _parse_bool,
    "set_prune_fraction": float,
    "set_update_period": int,
    "train_images": str.strip,
    "train_labels": str.strip,
    "test_images": str.strip,
    "test_labels": str.strip,
    "teacher_layers": _parse_int_tuple,
    "teacher_sparsity": float,
    "noise_sigma": float,
    "train_examples": int,
    "test_examples": int,
    "resume": _parse_opt_str,
}

REQUIRED_KEYS = ("method", "dataset")


@dataclass
class TrainConfig:
    method: str = "topkast"
    dataset: str = "synth"
    out_dir: str = "runs/out"
    steps: int = 3000
    batch_size: int = 128
    eval_period: int = 100
    churn_period: int = 200
    checkpoint_period: int = 1000
    seed: int = 0
    precision: int = 32
    fwd_sparsity: float = 0.0
    bwd_sparsity: float = 0.0
    refresh_period: int = 1
    dense_exempt_layers: tuple = ()
    layer_sizes: tuple = None  # defaulted by dataset kind
    lr: float = 0.1
    momentum: float = 0.9
    warmup_frac: float = 0.05
    decay_milestones: tuple = (0.6, 0.85)
    decay_factor: float = 0.1
    reg_coeff: float = 1e-4
    reg_exponent: int = 1
    b_selection: str = "topk"
    stop_exploration_at_step: int = None
    zero_momentum_on_mask_change: bool = False
    set_prune_fraction: float = 0.3
    set_update_period: int = 100
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    teacher_layers: tuple = (64, 64, 32, 1)
    teacher_sparsity: float = 0.8
    noise_sigma: float = 0.01
    train_examples: int = 4096
    test_examples: int = 1024
    resume: str = None

    def validate(self):
        if self.method not in baselines.METHODS:
            raise ConfigError(
                f"method must be one of {baselines.METHODS}, got {self.method!r}"
            )
        if self.dataset not in ("idx", "synth"):
            raise ConfigError(f"dataset must be 'idx' or 'synth', got {self.dataset!r}")
        if not 0.0 <= self.fwd_sparsity < 1.0:
            raise ConfigError(f"fwd_sparsity must be in [0, 1), got {self.fwd_sparsity}")
        if not 0.0 <= self.bwd_sparsity < 1.0:
            raise ConfigError(f"bwd_sparsity must be in [0, 1), got {self.bwd_sparsity}")
        if self.bwd_sparsity > self.fwd_sparsity:
            raise ConfigError(
                "bwd_sparsity cannot exceed fwd_sparsity "
                "(the backward set contains the forward set)"
            )
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        for key in ("batch_size", "eval_period", "churn_period", "refresh_period",
                    "set_update_period"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.checkpoint_period < 0:
            raise ConfigError("checkpoint_period must be >= 0 (0 disables)")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if not 0.0 <= self.set_prune_fraction < 1.0:
            raise ConfigError("set_prune_fraction must be in [0, 1)")
        if self.reg_exponent not in (1, 2):
            raise ConfigError("reg_exponent must be 1 or 2")
        if self.b_selection not in ("topk", "random"):
            raise ConfigError("b_selection must be 'topk' or 'random'")
        if self.reg_coeff < 0:
            raise ConfigError("reg_coeff must be >= 0")
        if self.dataset == "idx":
            for key in ("train_images", "train_labels", "test_images", "test_labels"):
                if getattr(self, key) is None:
                    raise ConfigError(f"dataset=idx requires {key}")
        return self

    def resolved_layer_sizes(self):
        if self.layer_sizes is not None:
            return self.layer_sizes
        return (784, 300, 100, 10) if self.dataset == "idx" else (64, 64, 32, 1)

    def exempt_layer_names(self):
        """Map 'first'/'last' aliases to the weight-layer names."""
        n_layers = len(self.resolved_layer_sizes()) - 1
        out = set()
        for entry in self.dense_exempt_layers:
            if entry == "first":
                out.add("w0")
            elif entry == "last":
                out.add(f"w{n_layers - 1}")
            else:
                out.add(entry)
        return frozenset(out)

    def effective_spec(self):
        """Sparsity spec as the chosen method actually uses it.

        static and set keep B = A (backward sparsity equals forward);
        dense trains with no sparsity at all.
        """
        exempt = self.exempt_layer_names()
        if self.method == baselines.METHOD_DENSE:
            return SparsitySpec(0.0, 0.0, self.refresh_period, frozenset())
        if self.method in (baselines.METHOD_STATIC, baselines.METHOD_SET):
            return SparsitySpec(
                self.fwd_sparsity, self.fwd_sparsity, self.refresh_period, exempt
            )
        return SparsitySpec(
            self.fwd_sparsity, self.bwd_sparsity, self.refresh_period, exempt
        )


def read_config_file(path):
    """Flat key=value text; '#' starts a comment, blank lines are skipped."""
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = stripped.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def parse_config(path, overrides=None, env=None):
    """Merge file values with overrides (overrides win) into a TrainConfig.

    overrides maps config keys to raw strings, exactly as a file would
    spell them. The output-directory environment variable sits between the
    file and explicit overrides in precedence.
    """
    env = os.environ if env is None else env
    raw = read_config_file(path) if path is not None else {}
    if env.get(OUT_DIR_ENV):
        raw["out_dir"] = env[OUT_DIR_ENV]
    for key, value in (overrides or {}).items():
        raw[key] = value

    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ConfigError(f"missing required config keys: {missing}")

    kwargs = {}
    for key, value in raw.items():
        try:
            kwargs[key] = CONFIG_KEYS[key](value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return TrainConfig(**kwargs).validate()


def build_datasets(config):
    if config.dataset == "idx":
        train = data_io.load_idx_dataset(
            config.train_images, config.train_labels, split="train"
        )
        test = data_io.load_idx_dataset(
            config.test_images, config.test_labels, split="test"
        )
        task = "classify"
    else:
        spec = data_io.TeacherSpec(
            layer_sizes=config.teacher_layers,
            teacher_sparsity=config.teacher_sparsity,
            noise_sigma=config.noise_sigma,
            seed=config.seed,
        )
        train = data_io.synth_teacher_student(spec, config.train_examples, split="train")
        test = data_io.synth_teacher_student(
            spec, config.test_examples, split="test",
            example_offset=config.train_examples,
        )
        task = "regress"
    return train, test, task


def build_graphs(config, input_dim, task):
    dims = list(config.resolved_layer_sizes())
    dims[0] = input_dim
    loss = "softmax_xent" if task == "classify" else "mse"
    return mlp_graph(dims, loss=loss), mlp_graph(dims, loss=None), tuple(dims)


def evaluate(logits_graph, params, x, y, task, chunk=512):
    """Deterministic full-split evaluation: (mean loss, accuracy percent).

    Accuracy is nan for regression. Chunked with a fixed size so the
    result does not depend on batch configuration.
    """
    n = x.shape[0]
    loss_sum = 0.0
    correct = 0
    for lo in range(0, n, chunk):
        xb, yb = x[lo : lo + chunk], y[lo : lo + chunk]
        out = logits_graph.forward(params, xb)
        if task == "classify":
            shifted = out - out.max(axis=1, keepdims=True)
            logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            logp = shifted - logz
            loss_sum += float(-logp[np.arange(out.shape[0]), yb].sum())
            correct += int((out.argmax(axis=1) == yb).sum())
        else:
            resid = out - np.asarray(yb, dtype=out.dtype).reshape(out.shape)
            loss_sum += float((resid ** 2).sum())
    if task == "classify":
        return loss_sum / n, 100.0 * correct / n
    width = logits_graph.output_width()
    return loss_sum / (n * width), float("nan")


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def dense_step(state, graph, x, y, lr):
    """Mask-free training step: dense forward, dense gradients, plain SGD."""
    loss = graph.forward(state.store.as_dict(), x, y)
    active = {
        name: np.arange(state.store.size(name), dtype=np.int64)
        for name in state.store.names()
    }
    primary = graph.backward(1.0, active)
    apply_update(state, primary, None, lr=lr)
    return {"loss": float(loss), "refreshed": False}


def masked_step(state, graph, x, y, lr):
    """Fixed-mask step for the static and SET baselines (B = A).

    The exploration penalty degenerates to a plain magnitude penalty on
    the active weights, keeping decay treatment uniform across sparse
    methods.
    """
    alpha = masked_view(state)
    loss = graph.forward(alpha, x, y)
    active = dict(state.masks.b_indices)
    for name in state.store.names():
        if name not in active:
            active[name] = np.arange(state.store.size(name), dtype=np.int64)
    primary = graph.backward(1.0, active)
    reg = None
    if state.reg_coeff > 0:
        reg = []
        for name in state.store.maskable_names():
            a = state.masks.a_indices[name]
            rec = exploration_grad(
                state.store.flat(name), a, state.masks.b_indices[name],
                state.spec.d, state.ablation.reg_exponent,
            )
            rec.param = name
            reg.append(rec)
    apply_update(state, primary, reg, lr=lr)
    return {"loss": float(loss), "refreshed": False}


class Run:
    """One training run: owns the state, trackers, and output files."""

    def __init__(self, config):
        self.config = config.validate()
        self.dtype = np.float32 if config.precision == 32 else np.float64
        self.train_set, self.test_set, self.task = build_datasets(config)
        self.graph, self.logits_graph, self.dims = build_graphs(
            config, self.train_set.input_dim, self.task
        )
        self.spec = config.effective_spec()
        self.cursor = data_io.BatchCursor(
            self.train_set, config.batch_size, (config.seed, DATA_STREAM)
        )
        self.flops = flop_estimate(self.graph, self.spec)
        self.layer_sizes = {
            name: int(np.prod(self.graph.param_shapes[name]))
            for name in self.graph.param_slots
            if name.startswith("w")
        }
        self._init_state()

    # -- state construction ------------------------------------------------

    def _fresh_masks(self):
        cfg = self.config
        if cfg.method == baselines.METHOD_TOPKAST:
            rebuild_masks(self.state)
            return self.state.masks
        if cfg.method in (baselines.METHOD_STATIC, baselines.METHOD_SET):
            masks = baselines.static_mask_init(
                self.layer_sizes, cfg.fwd_sparsity, [cfg.seed, STATIC_STREAM]
            )
            for name in self.spec.dense_exempt_layers:
                if name in masks.a_indices:
                    full = np.arange(self.layer_sizes[name], dtype=np.int64)
                    masks.a_indices[name] = full
                    masks.b_indices[name] = full.copy()
            return masks
        # dense: full masks for instrumentation only; the optimizer never
        # sees them (state.masks stays None so the loop is mask-free).
        full_sets = {
            name: np.arange(n, dtype=np.int64) for name, n in self.layer_sizes.items()
        }
        return MaskPair(full_sets, {k: v.copy() for k, v in full_sets.items()}, 0)

    def _init_state(self):
        cfg = self.config
        store, self.init_scales = init_mlp_params(
            self.dims, [cfg.seed, INIT_STREAM], dtype=self.dtype
        )
        self.state = OptimizerState(
            store=store,
            spec=self.spec,
            masks=None,
            step=0,
            learning_rate=cfg.lr,
            reg_coeff=cfg.reg_coeff,
            momentum=cfg.momentum,
            ablation=AblationSwitches(
                b_selection=cfg.b_selection,
                stop_exploration_at_step=cfg.stop_exploration_at_step,
                reg_exponent=cfg.reg_exponent,
            ),
            zero_momentum_on_mask_change=cfg.zero_momentum_on_mask_change,
            seed=cfg.seed,
        )
        masks = self._fresh_masks()
        if cfg.method != baselines.METHOD_DENSE:
            self.state.masks = masks
        self.metric_masks = masks if cfg.method == baselines.METHOD_DENSE else None
        self.reservoir = ReservoirTracker(masks, self.layer_sizes)
        self.churn_prev = MaskSnapshot.from_masks(0, masks, self.layer_sizes)
        nan = float("nan")
        self.churn_latest = ChurnStats({}, nan, nan, nan)
        self.nonfinite_run = 0

        if cfg.resume:
            self._restore(ckpt.load_checkpoint(cfg.resume))

    def _restore(self, saved):
        cfg = self.config
        for name in saved.store.names():
            want = self.graph.param_shapes.get(name)
            if want is None or tuple(saved.store.get(name).shape) != tuple(want):
                raise ConfigError(
                    f"checkpoint parameter {name!r} does not match the configured model"
                )
        self.state.store = saved.store
        self.state.velocity = saved.velocity
        self.state.step = saved.step
        self.state.seed = saved.seed
        if cfg.method == baselines.METHOD_DENSE:
            self.metric_masks = saved.masks
        else:
            self.state.masks = saved.masks
        tracker = self.reservoir
        tracker.c0 = saved.reservoir_c0
        tracker.hist = saved.reservoir_hist
        self.churn_prev = MaskSnapshot(saved.churn_snapshot_step, saved.churn_snapshot_bits)
        self.churn_latest = ChurnStats(
            {}, saved.churn_latest[0], saved.churn_latest[1], saved.churn_latest[2]
        )
        self.nonfinite_run = saved.nonfinite_run

    # -- pieces ------------------------------------------------------------

    def current_masks(self):
        return self.metric_masks if self.state.masks is None else self.state.masks

    def eval_params(self):
        if self.config.method == baselines.METHOD_DENSE:
            return self.state.store.as_dict()
        return masked_view(self.state)

    def _checkpoint(self):
        masks = self.current_masks()
        return ckpt.Checkpoint(
            step=self.state.step,
            store=self.state.store,
            masks=masks,
            velocity=self.state.velocity,
            seed=self.config.seed,
            reservoir_c0=self.reservoir.c0,
            reservoir_hist=self.reservoir.hist,
            churn_snapshot_step=self.churn_prev.step,
            churn_snapshot_bits=self.churn_prev.bits,
            churn_latest=(
                self.churn_latest.min,
                self.churn_latest.mean,
                self.churn_latest.max,
            ),
            nonfinite_run=self.nonfinite_run,
        )

    def _set_regrow_all(self, step):
        cfg = self.config
        masks = self.state.masks
        for name in self.state.store.maskable_names():
            if name in self.spec.dense_exempt_layers:
                continue
            scale = self.init_scales[name]
            rng = np.random.default_rng([cfg.seed, SET_STREAM, step, hash_name(name)])
            new_a = baselines.set_regrow(
                self.state.store.flat(name),
                masks.a_indices[name],
                cfg.set_prune_fraction,
                lambda k, r, s=scale: r.normal(0.0, s, size=k),
                rng,
            )
            masks.a_indices[name] = new_a
            masks.b_indices[name] = new_a.copy()
        masks.step_built = step

    def _one_step(self, step):
        cfg = self.config
        lr = lr_schedule(
            cfg.lr, step, cfg.steps, cfg.warmup_frac,
            cfg.decay_milestones, cfg.decay_factor,
        )
        x, y = self.cursor.batch_for_step(step)
        method = cfg.method
        if method == baselines.METHOD_TOPKAST:
            m = train_step(self.state, self.graph, x, y, lr=lr)
        elif method == baselines.METHOD_DENSE:
            m = dense_step(self.state, self.graph, x, y, lr)
        else:
            if (
                method == baselines.METHOD_SET
                and step > 0
                and step % cfg.set_update_period == 0
            ):
                self._set_regrow_all(step)
                m = masked_step(self.state, self.graph, x, y, lr)
                m["refreshed"] = True
            else:
                m = masked_step(self.state, self.graph, x, y, lr)
        if m.get("refreshed"):
            self.reservoir.update(self.current_masks())
        return m

    # -- the loop ----------------------------------------------------------

    def execute(self):
        cfg = self.config
        os.makedirs(cfg.out_dir, exist_ok=True)
        metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
        x_test, y_test = self.test_set.arrays()
        last_row = None

        with open(metrics_path, "w", encoding="utf-8", newline="") as csv:
            csv.write(",".join(METRICS_COLUMNS) + "\n")
            for step in range(self.state.step, cfg.steps):
                try:
                    m = self._one_step(step)
                    finite = math.isfinite(m["loss"])
                except NumericError as exc:
                    finite = False
                    m = {"loss": float("nan"), "error": str(exc)}
                    self.state.step = step + 1  # the step still elapsed
                if finite:
                    self.nonfinite_run = 0
                else:
                    self.nonfinite_run += 1
                    if self.nonfinite_run >= 10:
                        raise TrainingDiverged(
                            f"loss non-finite for {self.nonfinite_run} consecutive "
                            f"steps at step {step} ({m.get('error', 'nan loss')})"
                        )
                done = self.state.step
                if done % cfg.churn_period == 0:
                    snap = MaskSnapshot.from_masks(
                        done, self.current_masks(), self.layer_sizes
                    )
                    self.churn_latest = mask_churn(self.churn_prev, snap)
                    self.churn_prev = snap
                if done % cfg.eval_period == 0:
                    eval_loss, eval_acc = evaluate(
                        self.logits_graph, self.eval_params(), x_test, y_test, self.task
                    )
                    row = (
                        done,
                        m["loss"],
                        eval_loss,
                        eval_acc,
                        self.churn_latest.min,
                        self.churn_latest.mean,
                        self.churn_latest.max,
                        self.reservoir.fraction(),
                        self.flops.fwd_ratio,
                        self.flops.bwd_ratio,
                    )
                    csv.write(",".join(_fmt(v) for v in row) + "\n")
                    csv.flush()
                    last_row = dict(zip(METRICS_COLUMNS, row))
                if (
                    cfg.checkpoint_period
                    and done % cfg.checkpoint_period == 0
                    and done < cfg.steps
                ):
                    ckpt.save_checkpoint(
                        self._checkpoint(),
                        os.path.join(cfg.out_dir, f"checkpoint_step{done}.tkas"),
                    )

        final_path = os.path.join(cfg.out_dir, "checkpoint_final.tkas")
        ckpt.save_checkpoint(self._checkpoint(), final_path)
        summary = {
            "method": cfg.method,
            "seed": cfg.seed,
            "steps": cfg.steps,
            "fwd_sparsity": cfg.fwd_sparsity,
            "bwd_sparsity": cfg.bwd_sparsity,
            "final": last_row,
            "flop_convention": self.flops.convention,
        }
        with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
        return summary


def run_experiment(config):
    """Train per the config; returns the summary dict (exit status 0)."""
    return Run(config).execute()


def evaluate_checkpoint(config, checkpoint_path):
    """Load a checkpoint against its config and score the test split."""
    config = replace(config, resume=None).validate()
    saved = ckpt.load_checkpoint(checkpoint_path)
    run = Run(config)
    run._restore(saved)
    x_test, y_test = run.test_set.arrays()
    loss, acc = evaluate(run.logits_graph, run.eval_params(), x_test, y_test, run.task)
    return {"step": saved.step, "eval_loss": loss, "eval_accuracy": acc}
