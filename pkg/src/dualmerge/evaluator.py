"""Evaluation: accuracy metrics, blend-factor search, barriers, landscapes.

Classification accuracy is argmax of cosine similarity between a model's
output embedding and the candidate class targets. Per-task accuracy scores
each task through its own head; joint accuracy pools every task's classes
and lets them compete on the union of both test sets.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import TaskDataset
from .errors import ContractError
from .matcher import MatchConfig, match_mudsc
from .merger import interpolate, merge
from .models import (ActivationProbe, ModelState, build_model, clone_state,
                     cosine_embedding_loss, forward, head_output, train,
                     _hidden_forward)
from .tensor import cosine_rows, pearson_rows, symmetric_eig


@dataclass(frozen=True)
class EvalReport:
    joint_acc: float
    task_accs: tuple[float, ...]
    avg_acc: float
    loss_per_task: tuple[float, ...]
    model_id: str

    def __post_init__(self):
        if abs(self.avg_acc - float(np.mean(self.task_accs))) > 1e-9:
            raise ContractError("avg_acc must equal the mean of task_accs")

    def to_jsonable(self) -> dict:
        return {
            "model_id": self.model_id,
            "joint_acc": self.joint_acc,
            "task_accs": list(self.task_accs),
            "avg_acc": self.avg_acc,
            "loss_per_task": list(self.loss_per_task),
        }


def _normalized(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(n, 1e-12)


def _head_outputs(m: ModelState, inputs: np.ndarray,
                  heads: list[str]) -> dict[str, np.ndarray]:
    acts = _hidden_forward(m, np.asarray(inputs, dtype=np.float32))
    hidden = acts[-1] if acts else np.asarray(inputs, dtype=np.float32)
    return {h: head_output(m, hidden, h) for h in dict.fromkeys(heads)}


def task_loss(m: ModelState, task: TaskDataset) -> float:
    out, _ = forward(m, task.inputs, head=m.head_for(task.task_id))
    return cosine_embedding_loss(out, task.targets)


def evaluate(m: ModelState, tasks: list[TaskDataset],
             model_id: str = "model") -> EvalReport:
    if not tasks:
        raise ContractError("need at least one task to evaluate")
    heads = [m.head_for(t.task_id) for t in tasks]

    task_accs = []
    losses = []
    for task, head in zip(tasks, heads):
        outputs = _head_outputs(m, task.inputs, [head])[head]
        scores = _normalized(outputs) @ task.class_targets.T.astype(np.float64)
        pred = task.class_ids[np.argmax(scores, axis=1)]
        task_accs.append(float(np.mean(pred == task.labels)))
        losses.append(cosine_embedding_loss(outputs, task.targets))

    all_inputs = np.concatenate([t.inputs for t in tasks], axis=0)
    all_labels = np.concatenate([t.labels for t in tasks])
    outputs_by_head = _head_outputs(m, all_inputs, heads)
    score_cols = []
    all_ids = []
    for task, head in zip(tasks, heads):
        scores = _normalized(outputs_by_head[head]) @ task.class_targets.T.astype(np.float64)
        score_cols.append(scores)
        all_ids.extend(task.class_ids.tolist())
    pred = np.asarray(all_ids)[np.argmax(np.concatenate(score_cols, axis=1), axis=1)]
    joint_acc = float(np.mean(pred == all_labels))

    return EvalReport(joint_acc=joint_acc, task_accs=tuple(task_accs),
                      avg_acc=float(np.mean(task_accs)),
                      loss_per_task=tuple(losses), model_id=model_id)


def scaled_performance(l_theta: float, l_one: float, l_zero: float) -> float:
    """Place a score between the average estimator (0) and the reference (1)."""
    if l_one == l_zero:
        raise ContractError("degenerate reference: l_one equals l_zero")
    return (l_theta - l_zero) / (l_one - l_zero)


def alpha_search(models: list[ModelState], probes: list[ActivationProbe],
                 train_tasks: list[TaskDataset], cfg: MatchConfig,
                 grid: list[float]) -> tuple[float, list[tuple[float, EvalReport]]]:
    """Pick the blend factor with the best average per-task training accuracy.

    Ties resolve toward the smaller alpha. Returns the winner plus one report
    per grid point, in grid order.
    """
    if not grid:
        raise ContractError("alpha grid must be nonempty")
    reports = []
    best_alpha, best_acc = None, -1.0
    for alpha in grid:
        result = match_mudsc(models, probes, replace(cfg, alpha=alpha, mode="mudsc"))
        merged = merge(models, result.perms)
        report = evaluate(merged, train_tasks, model_id=f"alpha={alpha}")
        reports.append((alpha, report))
        if report.avg_acc > best_acc or (
                report.avg_acc == best_acc and alpha < best_alpha):
            best_alpha, best_acc = alpha, report.avg_acc
    return best_alpha, reports


def barrier_scan(a: ModelState, b_aligned: ModelState,
                 tasks: list[TaskDataset], num_points: int,
                 ) -> list[tuple[float, tuple[float, ...]]]:
    """Per-task losses along the straight parameter path from a to b."""
    if num_points < 2:
        raise ContractError("a barrier scan needs at least 2 points")
    rows = []
    for lam in np.linspace(0.0, 1.0, num_points):
        model = interpolate(a, b_aligned, float(lam))
        rows.append((float(lam), tuple(task_loss(model, t) for t in tasks)))
    return rows


def barrier_csv(rows, task_ids: list[str]) -> str:
    header = "lambda," + ",".join(f"loss_{t}" for t in task_ids) + ",loss_avg"
    lines = [header]
    for lam, losses in rows:
        avg = float(np.mean(losses))
        lines.append(",".join([f"{lam!r}"] + [f"{v!r}" for v in losses] + [f"{avg!r}"]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Loss landscape over the top-2 principal directions of the model family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LandscapeGrid:
    xs: np.ndarray                  # [grid_res]
    ys: np.ndarray                  # [grid_res]
    losses: np.ndarray              # [grid_res, grid_res, n_tasks]
    markers: tuple[tuple[str, float, float], ...]
    variances: tuple[float, float]  # total squared projection per direction

    def csv(self, task_ids: list[str]) -> str:
        header = "x,y," + ",".join(f"loss_{t}" for t in task_ids) + ",loss_avg"
        lines = [header]
        for i, x in enumerate(self.xs):
            for j, y in enumerate(self.ys):
                vals = self.losses[i, j]
                row = [f"{x!r}", f"{y!r}"] + [f"{v!r}" for v in vals]
                row.append(f"{float(np.mean(vals))!r}")
                lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def markers_csv(self) -> str:
        lines = ["name,x,y"]
        lines += [f"{name},{x!r},{y!r}" for name, x, y in self.markers]
        return "\n".join(lines) + "\n"


def _flatten(m: ModelState, task_ids: list[str]) -> np.ndarray:
    """One parameter vector per model: trunk, stats, then one head per task.

    A model without a head for some task contributes its sole head in that
    slot, since that is the function it uses on the task.
    """
    parts = [m.params[k].ravel() for k in sorted(m.params)]
    parts += [m.norm_stats[k].ravel() for k in sorted(m.norm_stats)]
    for task_id in task_ids:
        head = m.heads[m.head_for(task_id)]
        parts += [head["weight"].ravel(), head["bias"].ravel()]
    return np.concatenate(parts).astype(np.float64)


def _unflatten(template: ModelState, task_ids: list[str],
               vec: np.ndarray) -> ModelState:
    params = {}
    pos = 0
    for k in sorted(template.params):
        n = template.params[k].size
        params[k] = vec[pos:pos + n].reshape(template.params[k].shape
                                             ).astype(np.float32)
        pos += n
    norm_stats = {}
    for k in sorted(template.norm_stats):
        n = template.norm_stats[k].size
        norm_stats[k] = vec[pos:pos + n].reshape(template.norm_stats[k].shape
                                                 ).astype(np.float32)
        pos += n
    heads = {}
    out_spec = template.spec.layers[-1]
    for task_id in task_ids:
        w_n = out_spec.out_dim * out_spec.in_dim
        heads[task_id] = {
            "weight": vec[pos:pos + w_n].reshape(out_spec.out_dim, out_spec.in_dim
                                                 ).astype(np.float32),
            "bias": vec[pos + w_n:pos + w_n + out_spec.out_dim].astype(np.float32),
        }
        pos += w_n + out_spec.out_dim
    return ModelState(spec=template.spec, params=params, heads=heads,
                      norm_stats=norm_stats, meta={"landscape_point": True})


def _subsample(task: TaskDataset, max_samples: int) -> TaskDataset:
    if len(task) <= max_samples:
        return task
    idx = np.linspace(0, len(task) - 1, max_samples).astype(np.int64)
    return TaskDataset(inputs=task.inputs[idx], targets=task.targets[idx],
                       labels=task.labels[idx], class_ids=task.class_ids,
                       class_targets=task.class_targets, task_id=task.task_id)


def landscape(models: list[ModelState], tasks: list[TaskDataset],
              grid_res: int = 41, names: list[str] | None = None,
              margin: float = 1.2, max_samples: int = 256) -> LandscapeGrid:
    """Loss surface on the plane spanned by the models' top-2 PCA directions.

    Parameters are flattened, centered, and reduced through the small
    models-by-models Gram matrix; losses are evaluated on a grid covering the
    projected markers with a margin.
    """
    if len(models) < 3:
        raise ContractError("landscape PCA needs at least 3 models")
    if any(m.spec != models[0].spec for m in models):
        raise ContractError("models must share an architecture spec")
    names = names or [f"model{i}" for i in range(len(models))]
    task_ids = [t.task_id for t in tasks]
    eval_tasks = [_subsample(t, max_samples) for t in tasks]

    vectors = np.stack([_flatten(m, task_ids) for m in models])
    mean = vectors.mean(axis=0)
    centered = vectors - mean
    gram = centered @ centered.T
    eigvals, eigvecs = symmetric_eig(gram)

    directions = []
    variances = []
    for i in range(2):
        lam = float(max(eigvals[i], 0.0))
        variances.append(lam)
        if lam < 1e-12:
            directions.append(np.zeros_like(mean))
        else:
            directions.append(centered.T @ eigvecs[:, i] / np.sqrt(lam))
    coords = np.stack([centered @ d for d in directions], axis=1)

    lo = np.empty(2)
    hi = np.empty(2)
    for axis in range(2):
        c = 0.5 * (coords[:, axis].max() + coords[:, axis].min())
        half = 0.5 * (coords[:, axis].max() - coords[:, axis].min())
        half = half if half > 0 else 1.0
        lo[axis], hi[axis] = c - margin * half, c + margin * half
    xs = np.linspace(lo[0], hi[0], grid_res)
    ys = np.linspace(lo[1], hi[1], grid_res)

    losses = np.empty((grid_res, grid_res, len(tasks)))
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            point = _unflatten(models[0], task_ids,
                               mean + x * directions[0] + y * directions[1])
            losses[i, j] = [task_loss(point, t) for t in eval_tasks]

    markers = tuple((name, float(coords[k, 0]), float(coords[k, 1]))
                    for k, name in enumerate(names))
    return LandscapeGrid(xs=xs, ys=ys, losses=losses, markers=markers,
                         variances=(variances[0], variances[1]))


# ---------------------------------------------------------------------------
# Weight-vs-activation inconsistency demo
# ---------------------------------------------------------------------------

def pairwise_merge_stats(parent_a: ModelState, parent_b: ModelState,
                         layer: int, probe_inputs: np.ndarray) -> np.ndarray:
    """All-pairs unit-average statistics for one hidden layer.

    Parents must agree on every layer below ``layer`` so both see the same
    inputs. Returns rows ``(i, j, weight_sim, act_sim, min_parent_act_sim)``
    where the merged unit averages unit i of parent_a with unit j of
    parent_b.
    """
    spec = parent_a.spec
    if spec != parent_b.spec:
        raise ContractError("parents must share an architecture spec")
    if not 0 <= layer < len(spec.hidden):
        raise ContractError(f"layer {layer} out of range")
    if spec.hidden[layer].kind != "linear_relu":
        raise ContractError("the demo needs a plain relu hidden layer")

    x = np.asarray(probe_inputs, dtype=np.float32)
    prev = x if layer == 0 else _hidden_forward(parent_a, x)[layer - 1]

    def layer_params(m):
        return m.params[f"layers.{layer}.weight"], m.params[f"layers.{layer}.bias"]

    w_a, b_a = layer_params(parent_a)
    w_b, b_b = layer_params(parent_b)
    pre_a = prev @ w_a.T + b_a                      # [S, D]
    pre_b = prev @ w_b.T + b_b
    act_a = np.maximum(pre_a, 0.0)
    act_b = np.maximum(pre_b, 0.0)

    vec_a = np.concatenate([w_a, b_a[:, None]], axis=1)
    vec_b = np.concatenate([w_b, b_b[:, None]], axis=1)
    weight_sim = cosine_rows(vec_a, vec_b)          # [D, D]
    act_sim = pearson_rows(act_a.T, act_b.T)        # [D, D]

    # Merged unit (i, j): pre-activation is the mean of the parents' pre-acts.
    merged = np.maximum(
        0.5 * (pre_a.T[:, None, :].astype(np.float64)
               + pre_b.T[None, :, :].astype(np.float64)), 0.0)
    mc = merged - merged.mean(axis=2, keepdims=True)
    mn = np.sqrt(np.einsum("ijs,ijs->ij", mc, mc))
    mn = np.where(mn < 1e-12, np.inf, mn)

    def corr_with(acts: np.ndarray, axis: int) -> np.ndarray:
        ac = acts.T.astype(np.float64)
        ac = ac - ac.mean(axis=1, keepdims=True)           # [D, S]
        an = np.sqrt(np.einsum("ds,ds->d", ac, ac))
        an = np.where(an < 1e-12, np.inf, an)
        pattern = "ijs,is->ij" if axis == 0 else "ijs,js->ij"
        dots = np.einsum(pattern, mc, ac)
        scale = an[:, None] if axis == 0 else an[None, :]
        return dots / (mn * scale)

    sim_to_a = corr_with(act_a, axis=0)
    sim_to_b = corr_with(act_b, axis=1)
    min_parent = np.minimum(sim_to_a, sim_to_b)

    d = w_a.shape[0]
    ii, jj = np.meshgrid(np.arange(d), np.arange(d), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel(), weight_sim.ravel(),
                     act_sim.ravel(), min_parent.ravel()], axis=1)


def inconsistency_demo(model: ModelState, retrain_layer: int,
                       task: TaskDataset, seed: int, *, epochs: int = 30,
                       lr: float = 0.05, batch: int = 64,
                       probe_samples: int = 256) -> np.ndarray:
    """Rebuild one hidden layer from scratch, retrain it alone, and compare.

    The retrained parent computes the same function through a differently
    parameterized layer, exposing unit pairs whose weight similarity and
    activation similarity disagree.
    """
    spec = model.spec
    fresh = build_model(spec, seed=seed)
    parent_b = replace_layer(model, retrain_layer, fresh)
    parent_b = train(parent_b, task, epochs=epochs, lr=lr, batch=batch,
                     seed=seed, trainable=[f"layers.{retrain_layer}."])
    probe = _subsample(task, probe_samples).inputs
    return pairwise_merge_stats(model, parent_b, retrain_layer, probe)


def replace_layer(m: ModelState, layer: int, donor: ModelState) -> ModelState:
    """Swap one hidden layer's parameters for the donor's."""
    out = clone_state(m)
    for suffix in ("weight", "bias"):
        key = f"layers.{layer}.{suffix}"
        out.params[key] = donor.params[key].copy()
    return out


def fig1_csv(rows: np.ndarray) -> str:
    lines = ["i,j,weight_sim,act_sim,min_parent_act_sim"]
    for i, j, w, a, p in rows:
        lines.append(f"{int(i)},{int(j)},{w!r},{a!r},{p!r}")
    return "\n".join(lines) + "\n"
