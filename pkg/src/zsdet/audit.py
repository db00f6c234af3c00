"""Finite-difference audit of the analytic loss gradients.

Builds random small instances (embeddings, label space, model, labeled
batch) and compares every analytic parameter gradient against central
finite differences of the batch loss.  Cycles through both training modes
and the mixing weights {0, 0.6, 1} so all loss paths get exercised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import batch_loss, loss_gradients
from .model import Model, RegionSample
from .semantics import EmbeddingTable, LabelSpace, _readonly

REL_TOL = 1e-4
ZERO_GUARD = 1e-7


def random_space(rng: np.random.Generator, n_classes: int, n_meta: int, n_unseen: int) -> LabelSpace:
    labels = tuple(f"c{i}" for i in range(1, n_classes + 1))
    metas = tuple(f"m{j}" for j in range(1, n_meta + 1))
    meta_of = tuple((i % n_meta) + 1 for i in range(n_classes)) + (n_meta + 1,)
    return LabelSpace(
        labels=labels,
        n_seen=n_classes - n_unseen,
        n_unseen=n_unseen,
        meta_labels=metas,
        _meta_of=meta_of,
    )


def random_instance(
    rng: np.random.Generator,
    d_f: int = 8,
    d: int = 8,
    n_classes: int = 7,
    n_meta: int = 3,
    batch_size: int = 4,
    from_config=None,
) -> tuple[Model, list[RegionSample], LabelSpace]:
    """One random model + labeled batch for gradient auditing."""
    n_unseen = max(1, n_classes // 4)
    space = random_space(rng, n_classes, n_meta, n_unseen)
    vectors = rng.standard_normal((d, n_classes))
    vectors /= np.linalg.norm(vectors, axis=0)
    table = EmbeddingTable(
        labels=space.labels,
        vectors=_readonly(vectors),
        background=_readonly(vectors.mean(axis=1)),
        finalized=True,
    )
    w2 = table.w2()
    if from_config is None:
        from .train import TrainConfig

        from_config = TrainConfig()
    model = Model(
        w1=rng.standard_normal((d_f, d)) * 0.5,
        w2=w2,
        col_norms=np.linalg.norm(w2, axis=0),
        labels=space.labels,
        n_seen=space.S,
        n_unseen=space.U,
        box_w=rng.standard_normal((d_f, 4 * space.S)) * 0.1,
        box_b=rng.standard_normal(4 * space.S) * 0.1,
        config=from_config,
    )
    targets = list(space.seen_ids) + [space.bg_id]
    batch = []
    for i in range(batch_size):
        y = int(targets[rng.integers(len(targets))])
        x1, y1 = rng.uniform(0, 50, size=2)
        w, h = rng.uniform(10, 40, size=2)
        box = np.array([x1, y1, x1 + w, y1 + h])
        gt_box = None
        if space.is_seen(y):
            gx1, gy1 = rng.uniform(0, 50, size=2)
            gw, gh = rng.uniform(10, 40, size=2)
            gt_box = np.array([gx1, gy1, gx1 + gw, gy1 + gh])
        batch.append(
            RegionSample(
                feature=rng.standard_normal(d_f),
                box=box,
                label=y,
                image_id=f"img{i}",
                gt_box=gt_box,
            )
        )
    return model, batch, space


def _rel_err(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    if scale < ZERO_GUARD:
        return 0.0
    return abs(a - n) / scale


@dataclass
class AuditResult:
    max_rel_err: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOL


def gradient_audit(
    trials: int = 100,
    seed: int = 0,
    h: float = 1e-5,
    inject_fault: bool = False,
) -> AuditResult:
    """Compare analytic gradients to central finite differences.

    Every W1, box-weight, and box-bias entry is perturbed by +-h.  Returns
    the worst relative error over all trials; the audit passes when it is
    below 1e-4.
    """
    rng = np.random.default_rng(seed)
    combos = [(m, l) for m in ("full", "seen_only") for l in (0.0, 0.6, 1.0)]
    worst = 0.0
    for trial in range(trials):
        mode, lam = combos[trial % len(combos)]
        model, batch, space = random_instance(rng)
        _, grads = loss_gradients(model, batch, space, lam, mode)
        analytic = {
            "w1": grads.dw1.copy(),
            "box_w": grads.dbox.copy(),
            "box_b": grads.dbox_b.copy(),
        }
        if inject_fault:
            analytic["w1"][0, 0] += 1e-2
        params = {"w1": model.w1, "box_w": model.box_w, "box_b": model.box_b}
        # Every trial sweeps W1; the (cheaper to get wrong, costlier to sweep)
        # box head is audited on every tenth trial.
        keys = ("w1", "box_w", "box_b") if trial % 10 == 0 else ("w1",)
        for key in keys:
            flat = params[key].reshape(-1)
            a_flat = analytic[key].reshape(-1)
            for idx in range(flat.size):
                orig = flat[idx]
                flat[idx] = orig + h
                up = batch_loss(model, batch, space, lam, mode)
                flat[idx] = orig - h
                down = batch_loss(model, batch, space, lam, mode)
                flat[idx] = orig
                numeric = (up - down) / (2.0 * h)
                worst = max(worst, _rel_err(float(a_flat[idx]), numeric))
    return AuditResult(max_rel_err=worst, trials=trials)
