"""SGD training loops: plain, gradient-norm (Cross-Lipschitz) regularized,
curvature regularized, and PGD adversarial training.

All four modes share one loop. Randomness is drawn from streams keyed by
(seed, purpose, epoch[, batch]) rather than one mutable generator, so modes
that skip a stream (plain training never draws probe directions) still
produce bit-identical parameter trajectories to the degenerate runs of the
richer modes, and resuming from a checkpoint needs nothing beyond the epoch
index and the parameters.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, cross_holder_graph
from .opnorm import OpNormProbe, estimate_opnorm_rows
from .attacks import AttackSpec, pgd_attack_batch


class TrainError(RuntimeError):
    """Bad training configuration, or a checkpoint mismatch."""


class DivergenceError(TrainError):
    """The loss left the reals; the run is unrecoverable."""


# stream purposes; part of the checkpoint compatibility contract
_SHUFFLE, _PROBE, _ATTACK = 1, 2, 3

_MODES = ("plain", "cross-lipschitz", "cross-holder", "adversarial")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.01
    lam1: float = 0.0
    lam2: float = 0.0
    q: float = 2.0
    probe_T: int = 10
    probe_o: float = 0.1
    seed: int = 0
    adv_eps: float = 0.0
    adv_p: float = 2.0
    adv_iterations: int = 10
    adv_restarts: int = 1
    top_m_margins: int = 0  # 0 = regularize every off-label margin
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = off
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise TrainError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise TrainError(f"lr must be > 0, got {self.lr}")
        if self.lam1 < 0 or self.lam2 < 0:
            raise TrainError("lam1 and lam2 must be >= 0")
        if self.adv_eps < 0:
            raise TrainError(f"adv_eps must be >= 0, got {self.adv_eps}")
        if float(self.adv_p) not in (2.0, float("inf")):
            raise TrainError(f"adv_p must be 2 or inf, got {self.adv_p}")
        if self.probe_T < 1 or self.probe_o <= 0:
            raise TrainError("probe needs T >= 1 and o > 0")
        if self.top_m_margins < 0:
            raise TrainError("top_m_margins must be >= 0")
        if self.checkpoint_every < 0:
            raise TrainError("checkpoint_every must be >= 0")
        if self.checkpoint_every > 0 and not self.checkpoint_path:
            raise TrainError("checkpoint_every > 0 needs checkpoint_path")


@dataclass
class TrainResult:
    model: object
    metrics: list  # one dict per completed epoch


def _stream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def _fingerprint(cfg, mode, n_params):
    """Config identity a checkpoint must match to be resumed. Epochs and
    checkpointing knobs are free to change between runs; everything that
    shapes the trajectory is pinned."""
    fields = dataclasses.asdict(cfg)
    for free in ("epochs", "checkpoint_every", "checkpoint_path"):
        fields.pop(free)
    fields["mode"] = mode
    fields["n_params"] = int(n_params)
    return json.dumps(fields, sort_keys=True)


def save_checkpoint(path, model, epoch, fingerprint):
    np.savez(path, theta=model.theta, epoch=np.int64(epoch), fingerprint=fingerprint)


def load_checkpoint(path, fingerprint):
    with np.load(path, allow_pickle=False) as blob:
        saved = str(blob["fingerprint"])
        if saved != fingerprint:
            raise TrainError(
                f"checkpoint {path} was written by an incompatible run"
            )
        return np.array(blob["theta"]), int(blob["epoch"])


def _accuracy(model, X, y, chunk=512):
    hits = 0
    for lo in range(0, y.size, chunk):
        hits += int(np.sum(model.predict(X[lo : lo + chunk]) == y[lo : lo + chunk]))
    return hits / y.size if y.size else 0.0


def _pair_rows(model, xb, yb, top_m):
    """Which (sample, class) margins the regularizer covers this batch:
    every j != y_i, or only the top_m strongest competitors by logit."""
    b, k = yb.size, model.K
    keep = np.ones((b, k), dtype=bool)
    keep[np.arange(b), yb] = False
    if 0 < top_m < k - 1:
        z = model.score(xb).copy()
        z[np.arange(b), yb] = -np.inf
        order = np.argsort(-z, axis=1, kind="stable")[:, :top_m]
        keep[:] = False
        keep[np.arange(b)[:, None], order] = True
    rows_i, rows_j = np.nonzero(keep)
    return keep, rows_i, rows_j


def _probe_batch(model, xb, yb, cfg, rng, instrument, where):
    """Algorithm step: fresh normal directions, T projected-ascent updates,
    and the final iterates become the frozen curvature directions for the
    parameter step."""
    keep, rows_i, rows_j = _pair_rows(model, xb, yb, cfg.top_m_margins)
    sample_shape = tuple(model.input_shape)
    v0 = rng.standard_normal((rows_i.size,) + sample_shape)
    margin = model.margin_batch_graph(xb[rows_i], yb[rows_i], rows_j)
    probe = OpNormProbe(o=cfg.probe_o, T=cfg.probe_T)

    trace = None
    if instrument is not None:
        def trace(kind, v):
            instrument(
                "ascent_" + kind,
                dict(where, pairs_i=rows_i, pairs_j=rows_j, v=v),
            )

    est = estimate_opnorm_rows(margin, v0=v0, probe=probe, trace=trace)
    v_arr = np.zeros((yb.size, model.K) + sample_shape)
    v_arr[rows_i, rows_j] = est.v_last
    return keep, v_arr


def _divergence_check(value, epoch, batch):
    if not np.isfinite(value):
        raise DivergenceError(
            f"loss diverged (got {value}) at epoch {epoch}, batch {batch}; "
            "lower the learning rate"
        )


def _run(model, dataset, cfg, mode, metrics_path=None, instrument=None, resume_from=None):
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    if model.n_params == 0:
        raise TrainError("model has no trainable parameters")
    if dataset.K != model.K:
        raise TrainError(f"dataset has {dataset.K} classes, model has {model.K}")
    if tuple(dataset.input_shape) != tuple(model.input_shape):
        raise TrainError(
            f"dataset shape {dataset.input_shape} does not match model "
            f"{model.input_shape}"
        )

    loss_cfg = LossConfig(
        lam1=cfg.lam1, lam2=cfg.lam2, q=cfg.q, probe_T=cfg.probe_T, probe_o=cfg.probe_o
    )
    needs_probe = cfg.lam1 > 0 and cfg.lam2 > 0
    attacking = mode == "adversarial" and cfg.adv_eps > 0

    fp = _fingerprint(cfg, mode, model.n_params)
    start_epoch = 0
    if resume_from is not None:
        theta, done = load_checkpoint(resume_from, fp)
        model.theta = theta
        start_epoch = done + 1

    X, y = dataset.X, dataset.y
    n = len(dataset)
    metrics = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(start_epoch, cfg.epochs):
            t0 = time.perf_counter()
            order = _stream(cfg.seed, _SHUFFLE, epoch).permutation(n)
            loss_sum = grad_sum = hess_sum = 0.0
            for bi, lo in enumerate(range(0, n, cfg.batch_size)):
                idx = order[lo : lo + cfg.batch_size]
                xb, yb = X[idx], y[idx]
                where = {"epoch": epoch, "batch": bi}

                pair_keep = v_arr = None
                if needs_probe:
                    rng = _stream(cfg.seed, _PROBE, epoch, bi)
                    pair_keep, v_arr = _probe_batch(
                        model, xb, yb, cfg, rng, instrument, where
                    )
                elif cfg.lam1 > 0 and cfg.top_m_margins:
                    pair_keep, _, _ = _pair_rows(model, xb, yb, cfg.top_m_margins)

                if attacking:
                    spec = AttackSpec(
                        eps=cfg.adv_eps,
                        p=cfg.adv_p,
                        iterations=cfg.adv_iterations,
                        restarts=cfg.adv_restarts,
                        clamp=dataset.clamp,
                        seed=int(_stream(cfg.seed, _ATTACK, epoch, bi).integers(2**63)),
                    )
                    *_, deltas = pgd_attack_batch(model, xb, yb, spec, return_deltas=True)
                    xb = xb + deltas

                aux = {}
                graph = cross_holder_graph(
                    model, xb, yb, loss_cfg,
                    v_star=v_arr, reduction="sum", pair_keep=pair_keep, aux=aux,
                )
                batch_loss = float(graph.output.data)
                _divergence_check(batch_loss, epoch, bi)
                gtheta = graph.gradient("theta").data / idx.size
                model.theta = model.theta - cfg.lr * gtheta

                loss_sum += batch_loss
                gterm, hterm = aux.get("grad_term_sum"), aux.get("hess_term_sum")
                if gterm is not None:
                    grad_sum += float(gterm.data)
                if hterm is not None:
                    hess_sum += float(hterm.data)
                if instrument is not None:
                    instrument(
                        "theta_step",
                        dict(where, v_star=v_arr, pair_keep=pair_keep,
                             loss_sum=batch_loss),
                    )

            _divergence_check(loss_sum, epoch, "end")
            row = {
                "epoch": epoch,
                "loss": loss_sum / n,
                "clean_acc": _accuracy(model, X, y),
                "grad_term": grad_sum / n,
                "hess_term": hess_sum / n,
                "wall_time_s": time.perf_counter() - t0,
            }
            metrics.append(row)
            if sink is not None:
                sink.write(json.dumps(row) + "\n")
                sink.flush()
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(cfg.checkpoint_path, model, epoch, fp)
    finally:
        if sink is not None:
            sink.close()
    return TrainResult(model=model, metrics=metrics)


def _forbid(mode, **fields):
    for name, value in fields.items():
        if value:
            raise TrainError(f"{mode} training does not take {name} (got {value})")


def train_plain(model, dataset, cfg, **kw):
    """Cross-entropy SGD, no regularizer, no attack."""
    _forbid("plain", lam1=cfg.lam1, lam2=cfg.lam2, adv_eps=cfg.adv_eps)
    return _run(model, dataset, cfg, "plain", **kw)


def train_cross_lipschitz(model, dataset, cfg, **kw):
    """Gradient-norm margin regularizer (the curvature weight stays 0)."""
    _forbid("cross-lipschitz", lam2=cfg.lam2, adv_eps=cfg.adv_eps)
    return _run(model, dataset, cfg, "cross-lipschitz", **kw)


def train_cross_holder(model, dataset, cfg, **kw):
    """Gradient-norm plus probed curvature regularizer. Per batch: fresh
    normal directions, T ascent steps on ||H v||, one SGD step with the
    final directions frozen."""
    _forbid("cross-holder", adv_eps=cfg.adv_eps)
    return _run(model, dataset, cfg, "cross-holder", **kw)


def train_adversarial(model, dataset, cfg, **kw):
    """Inner PGD crafts perturbations, outer SGD fits the perturbed batch."""
    _forbid("adversarial", lam1=cfg.lam1, lam2=cfg.lam2)
    return _run(model, dataset, cfg, "adversarial", **kw)


TRAINERS = {
    "plain": train_plain,
    "cross-lipschitz": train_cross_lipschitz,
    "cross-holder": train_cross_holder,
    "adversarial": train_adversarial,
}
