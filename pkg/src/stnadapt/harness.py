"""Training, adaptation strategies, metrics and the experiment protocol.

Adaptation retrains a chosen subset of parameter groups on target-domain
data at a tenth of the base learning rate; everything outside the subset
stays bitwise untouched.  The relative-reduction metric places no
adaptation at 0% and full adaptation at 100%.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import models, synthdata
from .autodiff import NumericsError, Tensor, grads_for
from .layers import AdamState, EarlyStopper, adam_step, mse_loss
from .models import Model, ModelSpec, build_model, forward, localization_forward
from .stn import mean_theta, theta_statistics
from .synthdata import Dataset

STRATEGIES = ("none", "stn", "stn-out", "full", "mean-theta")
_TRAINABLE = {
    "none": (),
    "stn": ("stn",),
    "stn-out": ("stn", "output"),
    "full": ("stn", "trunk", "output"),
}

BASE_SESSION = "spk1_ses1"


class StrategyError(ValueError):
    """Adaptation strategy incompatible with the model or inputs."""


# -- spec / data preparation ---------------------------------------------


def spec_from_config(cfg: dict, variant: str | None = None) -> ModelSpec:
    variant = variant or cfg["variant"]
    name = {"2d": "regressor2d", "3d": "regressor3d"}.get(variant, variant)
    return ModelSpec.scaled(
        cfg["scale"],
        variant=name,
        with_stn=cfg["with_stn"],
        in_height=cfg["image_height"],
        in_width=cfg["image_width"],
        block_frames=cfg["block_frames"],
        t_stride=cfg["block_stride"],
        conv_filters=tuple(cfg["conv_filters"]),
        fc_width=cfg["fc_width"],
        loc_filters=tuple(cfg["loc_filters"]),
        loc_fc_width=cfg["loc_fc_width"],
        dropout=cfg["dropout"],
    )


def prepare_dataset(session: Dataset, spec: ModelSpec, cfg: dict,
                    stats=None) -> Dataset:
    """Downscale images to the model resolution, standardize targets, and
    assemble frame blocks for the 3-d variant."""
    factor = session.images.shape[-1] // spec.in_width
    ds = Dataset(
        images=synthdata.downscale_images(session.images, factor),
        spectra=session.spectra,
        splits=session.splits,
        standardized=session.standardized,
        target_mean=session.target_mean,
        target_std=session.target_std,
    )
    if not ds.standardized:
        ds = synthdata.standardize_targets(ds, stats)
    if spec.variant == "regressor3d":
        ds = synthdata.make_blocks(ds, spec.block_frames, cfg["block_stride"])
    return ds


# -- evaluation ----------------------------------------------------------


def evaluate(model: Model, images: np.ndarray, targets: np.ndarray,
             batch: int = 256) -> float:
    """Eval-mode MSE; per-sample errors reduced with an exact sum, so the
    result is independent of sample order."""
    per_sample: list[float] = []
    for lo in range(0, images.shape[0], batch):
        pred = forward(model, Tensor(images[lo:lo + batch]), mode="eval").data
        err = (pred.astype(np.float64) - targets[lo:lo + batch]) ** 2
        per_sample.extend(err.sum(axis=1).tolist())
    total = targets.shape[0] * targets.shape[1]
    return math.fsum(per_sample) / total


def evaluate_split(model: Model, dataset: Dataset, split: str) -> float:
    images, targets = dataset.split(split)
    return evaluate(model, images, targets.astype(np.float64))


# -- training loop -------------------------------------------------------


def train_model(
    model: Model,
    dataset: Dataset,
    *,
    lr: float,
    batch_size: int,
    max_epochs: int,
    patience: int,
    min_delta: float = 0.0,
    seed: int = 0,
    trainable_groups: tuple[str, ...] | None = None,
    log=None,
) -> dict:
    """Adam + early stopping on the validation split.

    Only parameters in ``trainable_groups`` receive updates; the rest are
    never touched.  Returns the loss history.
    """
    groups = model.group_names()
    if trainable_groups is None:
        trainable_groups = tuple(groups)
    for g in trainable_groups:
        if g not in groups:
            raise StrategyError(
                f"group {g!r} not present in model (has {groups})"
            )
    trainable = {k: p for k, p in model.params.items()
                 if k.split(".", 1)[0] in trainable_groups}
    if not trainable:
        return {"train_loss": [], "val_loss": [], "epochs": 0}

    rng = np.random.default_rng([seed, 13])
    state = AdamState(lr=lr)
    stopper = EarlyStopper(patience=patience, min_delta=min_delta)
    train_idx = dataset.splits["train"]
    history = {"train_loss": [], "val_loss": []}
    step = 0
    for epoch in range(max_epochs):
        order = rng.permutation(len(train_idx))
        epoch_losses = []
        for lo in range(0, len(order), batch_size):
            idx = train_idx[order[lo:lo + batch_size]]
            x = Tensor(dataset.images[idx])
            t = Tensor(dataset.spectra[idx])
            pred = forward(model, x, mode="train", rng=rng)
            loss = mse_loss(pred, t)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericsError(
                    f"training diverged: non-finite loss at step {step}"
                )
            grads = grads_for(loss, trainable)
            adam_step(trainable, grads, state)
            epoch_losses.append(val)
            step += 1
        val_loss = evaluate_split(model, dataset, "val")
        history["train_loss"].append(float(np.mean(epoch_losses)))
        history["val_loss"].append(val_loss)
        if log:
            log(f"epoch {epoch + 1}: train {history['train_loss'][-1]:.4f} "
                f"val {val_loss:.4f}")
        if not stopper.update(val_loss, trainable):
            break
    stopper.restore(trainable)
    history["epochs"] = len(history["val_loss"])
    history["best_val"] = stopper.best_loss
    return history


def train_base(cfg: dict, base_session: Dataset, seed: int,
               variant: str | None = None, log=None) -> tuple[Model, dict]:
    """Train the base model on the base session; statistics of its training
    split become the corpus-wide target normalization."""
    spec = spec_from_config(cfg, variant)
    ds = prepare_dataset(base_session, spec, cfg)
    model = build_model(spec, seed=seed)
    model.target_mean = ds.target_mean
    model.target_std = ds.target_std
    history = train_model(
        model, ds,
        lr=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        min_delta=cfg["min_delta"],
        seed=seed,
        log=log,
    )
    history["dev_mse"] = evaluate_split(model, ds, "val")
    return model, history


# -- adaptation ----------------------------------------------------------


def compute_thetas(model: Model, images: np.ndarray, batch: int = 256
                   ) -> np.ndarray:
    """Localization-network theta per sample, eval mode, [N,6]."""
    if not model.spec.with_stn:
        raise StrategyError("model was built without an STN module")
    out = []
    for lo in range(0, images.shape[0], batch):
        x = images[lo:lo + batch]
        if x.ndim == 5:  # frame blocks: the localization net sees the
            x = x[:, :, x.shape[2] // 2]  # central frame
        out.append(localization_forward(model, Tensor(x)).data)
    return np.concatenate(out, axis=0).astype(np.float64)


def adapt(base_model: Model, target: Dataset, strategy: str, cfg: dict,
          seed: int, log=None) -> tuple[Model, dict]:
    """Adapt a trained model to a target session.

    ``mean-theta`` expects ``base_model`` to be an already STN-adapted
    model; it replaces the localization network with the mean transform
    over the target training split and does no further training.
    """
    if strategy not in STRATEGIES:
        raise StrategyError(f"unknown strategy {strategy!r}")
    if strategy != "none" and strategy != "full" and not base_model.spec.with_stn:
        raise StrategyError(
            f"strategy {strategy!r} needs an STN-equipped model"
        )
    model = base_model.clone()
    if strategy == "none":
        return model, {"epochs": 0}
    if strategy == "mean-theta":
        thetas = compute_thetas(model, target.images[target.splits["train"]])
        model.fixed_theta = mean_theta(thetas)
        return model, {"epochs": 0, "theta": model.fixed_theta.tolist()}
    groups = tuple(g for g in _TRAINABLE[strategy] if g in model.group_names())
    history = train_model(
        model, target,
        lr=cfg["learning_rate"] / cfg["adapt_lr_divisor"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["adapt_max_epochs"],
        patience=cfg["patience"],
        min_delta=cfg["min_delta"],
        seed=seed,
        trainable_groups=groups,
        log=log,
    )
    return model, history


# -- metrics -------------------------------------------------------------


def relative_reduction(mse_none: float, mse_adapted: float,
                       mse_full: float) -> float:
    """Percent of the none-to-full gap closed by an adapted model."""
    if abs(mse_none - mse_full) < 1e-12:
        raise ValueError("degenerate gap: mse_none == mse_full")
    if mse_none <= mse_full:
        raise ValueError(
            f"expected mse_none > mse_full, got {mse_none} <= {mse_full}"
        )
    return 100.0 * (mse_none - mse_adapted) / (mse_none - mse_full)


def round_percent(value: float) -> int:
    """Integer rounding used in report tables (half away from zero)."""
    return int(math.floor(value + 0.5)) if value >= 0 else -int(
        math.floor(-value + 0.5)
    )


def average_reduction(values: list[float]) -> int:
    """Average row of a report table: mean of the rounded percentages."""
    return round_percent(float(np.mean([round_percent(v) for v in values])))


def format_reduction(value: float) -> str:
    return f"(-{round_percent(value)}%)"


# -- experiment matrix ---------------------------------------------------


def run_experiment_matrix(cfg: dict, data_dir, out_dir, log=None) -> dict:
    """Adapt the base model to every other session with every strategy.

    Writes one JSON per seed under ``out_dir`` and returns the merged
    results structure the report command renders.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sessions = [p.stem for p in sorted(data_dir.glob("*.utis"))]
    if BASE_SESSION not in sessions:
        raise FileNotFoundError(f"base session {BASE_SESSION} not in {data_dir}")
    targets = [s for s in sessions if s != BASE_SESSION]
    results: dict = {"config_scale": cfg["scale"], "seeds": {}}
    for seed in cfg["seeds"]:
        base_ds_raw = synthdata.load_session(data_dir / f"{BASE_SESSION}.utis")
        model, base_hist = train_base(cfg, base_ds_raw, seed, log=log)
        stats = (model.target_mean, model.target_std)
        seed_res = {"base_dev_mse": base_hist["dev_mse"], "targets": {}}
        for target_id in targets:
            raw = synthdata.load_session(data_dir / f"{target_id}.utis")
            ds = prepare_dataset(raw, model.spec, cfg, stats)
            cell: dict = {}
            stn_model = None
            for strategy in STRATEGIES:
                src = stn_model if strategy == "mean-theta" else model
                if strategy == "mean-theta" and src is None:
                    continue
                adapted, _ = adapt(src, ds, strategy, cfg, seed, log=log)
                cell[strategy] = evaluate_split(adapted, ds, "test")
                if strategy == "stn":
                    stn_model = adapted
                    stats_train = theta_statistics(
                        compute_thetas(adapted,
                                       ds.images[ds.splits["train"]])
                    )
                    cell["theta_mean"] = stats_train["mean"].tolist()
                    cell["theta_var"] = stats_train["var"].tolist()
            seed_res["targets"][target_id] = cell
            if log:
                log(f"seed {seed} {target_id}: " + " ".join(
                    f"{s}={cell[s]:.3f}" for s in STRATEGIES if s in cell))
        results["seeds"][str(seed)] = seed_res
        with open(out_dir / f"seed{seed}.json", "w") as fh:
            json.dump(seed_res, fh, indent=1, sort_keys=True)
    return results


def load_runs(out_dir) -> dict:
    """Re-assemble matrix results from a runs directory."""
    out_dir = Path(out_dir)
    results: dict = {"seeds": {}}
    for path in sorted(out_dir.glob("seed*.json")):
        seed = path.stem[len("seed"):]
        with open(path) as fh:
            results["seeds"][seed] = json.load(fh)
    if not results["seeds"]:
        raise FileNotFoundError(f"no seed*.json files under {out_dir}")
    return results


def _mean_over_seeds(results: dict) -> dict[str, dict[str, float]]:
    table: dict[str, dict[str, list[float]]] = {}
    for seed_res in results["seeds"].values():
        for target, cell in seed_res["targets"].items():
            row = table.setdefault(target, {})
            for strategy in STRATEGIES:
                if strategy in cell:
                    row.setdefault(strategy, []).append(cell[strategy])
    return {
        target: {s: float(np.mean(v)) for s, v in row.items()}
        for target, row in table.items()
    }


def render_report(results: dict, fmt: str = "text") -> str:
    """Table of per-target MSE per strategy with relative reductions."""
    table = _mean_over_seeds(results)
    rows = []
    reductions: dict[str, list[float]] = {s: [] for s in STRATEGIES}
    for target in sorted(table):
        row = table[target]
        cells = {s: row.get(s) for s in STRATEGIES}
        red = {}
        if all(cells[s] is not None for s in ("none", "full")):
            for s in STRATEGIES:
                if cells[s] is None:
                    continue
                r = relative_reduction(cells["none"], cells[s], cells["full"])
                red[s] = r
                reductions[s].append(r)
        rows.append((target, cells, red))

    if fmt == "csv":
        lines = ["target," + ",".join(STRATEGIES)]
        for target, cells, red in rows:
            lines.append(target + "," + ",".join(
                "" if cells[s] is None else f"{cells[s]:.6f}"
                for s in STRATEGIES))
        return "\n".join(lines) + "\n"

    widths = 18
    header = "target".ljust(12) + "".join(s.ljust(widths) for s in STRATEGIES)
    lines = [header, "-" * len(header)]
    for target, cells, red in rows:
        parts = [target.ljust(12)]
        for s in STRATEGIES:
            if cells[s] is None:
                parts.append("-".ljust(widths))
            else:
                text = f"{cells[s]:.3f}"
                if s in red and s not in ("none", "full"):
                    text += f" {format_reduction(red[s])}"
                parts.append(text.ljust(widths))
        lines.append("".join(parts))
    avg = ["avg. diff.".ljust(12)]
    for s in STRATEGIES:
        if reductions[s]:
            avg.append(f"(-{average_reduction(reductions[s])}%)".ljust(widths))
        else:
            avg.append("-".ljust(widths))
    lines.append("".join(avg))

    # Per-target transform statistics from the STN-adapted models.
    lines.append("")
    lines.append("theta statistics (mean over seeds of per-session mean/var):")
    for seed_res in list(results["seeds"].values())[:1]:
        for target in sorted(seed_res["targets"]):
            cell = seed_res["targets"][target]
            if "theta_mean" not in cell:
                continue
            mean = np.array(cell["theta_mean"])
            var = np.array(cell["theta_var"])
            lines.append(
                f"  {target}: mean=" +
                " ".join(f"{v: .3f}" for v in mean) +
                "  var=" + " ".join(f"{v:.2e}" for v in var)
            )
    return "\n".join(lines) + "\n"
