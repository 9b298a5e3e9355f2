"""Config-driven experiment sweeps that emit CSV rows and SVG figures.

A config is a flat text file of ``key = value`` lines; values are parsed as
JSON and fall back to plain strings.  Every experiment has a fixed key set
with defaults, and unknown keys are rejected by name.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .estimators import EstimatorKind, Kind
from .lola import LolaConfig, LolaPaths, run_lola_experiment
from .meta import (
    ALL_CODES,
    EstimatorAssignment,
    InnerLoopConfig,
    MdpSpec,
    MetaProblem,
    measure,
    measure_compositional_bias,
    mdp_seed,
)
from .svg import Series, line_chart

__all__ = [
    "EXPERIMENTS",
    "FIELDS",
    "FIGURES",
    "ConfigError",
    "parse_config",
    "resolve_config",
    "format_config",
    "config_hash",
    "run_experiment",
    "write_csv",
    "read_csv",
    "render_figure",
]

FIELDS = (
    "experiment", "config_hash", "aggregation", "variant", "kind", "code", "k_steps",
    "learning_rate", "batch_size", "injection", "mode", "inner_batch", "update", "seed",
    "mdp_index", "n_mdps", "n_trials", "bias_norm", "variance", "mean_correlation",
    "compositional_bias", "mean_return", "slope",
)

# keys that describe where output goes rather than what is computed
RUNTIME_KEYS = ("figures",)


class ConfigError(ValueError):
    pass


_MDP = dict(n_states=20, n_actions=5, density=0.001, horizon=20, discount=0.8,
            noise_coefficient=1.0, n_mdps=10, n_trials=20, mdp_indices=None)

EXPERIMENTS = {
    "maml-ablation": dict(_MDP, k_steps=[1], learning_rates=[10.0], batch_sizes=[10, 100, 1000],
                          kinds=["lvc", "ad"], codes=list(ALL_CODES)),
    "lirpg-ablation": dict(_MDP, k_steps=[1, 3, 5], learning_rates=[10.0], batch_sizes=[10, 100],
                           kinds=["lvc", "ad"], codes=["ESE", "SSS"]),
    "bias-scaling": dict(_MDP, variant="maml", k_steps=[1], learning_rates=[10.0],
                         batch_sizes=[10, 100, 1000, 10000], code="SEE", kind="lvc"),
    "hessian-injection": dict(_MDP, n_trials=2, variant="maml", k_steps=[1, 2, 3],
                              learning_rates=[1.0, 10.0],
                              coefficients=[round(0.1 * i, 1) for i in range(11)],
                              code="EEE", kind="lvc", batch_size=10, perturbation_seed=0),
    "lola": dict(modes=["exact", "dice_on_policy", "dice_off_policy"], inner_batches=[128],
                 outer_batch=128, outer_lr=0.1, inner_lr=0.3, discount=0.96, rollout_length=100,
                 n_updates=500, value_lr=0.1, buffer_capacity=1024, buffer_sample=128,
                 optimizer="sgd", clip=1.0, normalize_weights=False, n_seeds=10, seeds=None, curve_every=10),
}

_SWEEPS = ("k_steps", "learning_rates", "batch_sizes", "kinds", "codes", "coefficients", "modes",
           "inner_batches")
_NULLABLE = {"mdp_indices": "int_list", "seeds": "int_list", "clip": "float"}
_MODES = ("exact", "dice_on_policy", "dice_off_policy")


# ---------------------------------------------------------------------------
# config handling


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _is_int(v):
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _is_num(v):
    return _is_int(v) or (isinstance(v, float) and np.isfinite(v))


def _coerce(key, value, default):
    def fail(what):
        raise ConfigError(f"{key}: expected {what}, got {value!r}")

    if key in _NULLABLE and value is None:
        return None
    if key in _NULLABLE:
        if _NULLABLE[key] == "float":
            return float(value) if _is_num(value) else fail("a number or null")
        value = [value] if _is_int(value) else value
        if not isinstance(value, list) or not value or not all(_is_int(v) for v in value):
            fail("a nonempty list of integers or null")
        return [int(v) for v in value]
    if key in _SWEEPS or key == "figures":
        value = value if isinstance(value, list) else [value]
        if not value and key != "figures":
            fail("a nonempty list")
        return [_coerce(f"{key}[]", v, default[0]) for v in value] if default else list(value)
    if isinstance(default, bool):
        return value if isinstance(value, bool) else fail("true or false")
    if _is_int(default):
        return int(value) if _is_int(value) else fail("an integer")
    if isinstance(default, float):
        return float(value) if _is_num(value) else fail("a number")
    if isinstance(default, str):
        return value if isinstance(value, str) else fail("a string")
    return value


def resolve_config(raw: dict) -> dict:
    """Fill defaults and validate; the result fully determines the run."""
    if "experiment" not in raw:
        raise ConfigError("missing key: experiment")
    name = raw["experiment"]
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {sorted(EXPERIMENTS)}")
    defaults = dict(EXPERIMENTS[name], seed=0, figures=[f for f, s in FIGURES.items()
                                                         if s.experiment == name])
    for key in raw:
        if key != "experiment" and key not in defaults:
            raise ConfigError(f"unknown key for {name}: {key}")
    cfg = {"experiment": name}
    for key, default in defaults.items():
        cfg[key] = _coerce(key, raw.get(key, default), default)
    _validate(cfg)
    return cfg


def _validate(cfg):
    try:
        for code in cfg.get("codes", []) + ([cfg["code"]] if "code" in cfg else []):
            EstimatorAssignment.from_code(code)
        for kind in cfg.get("kinds", []) + ([cfg["kind"]] if "kind" in cfg else []):
            Kind(kind)
        if "variant" in cfg and cfg["variant"] not in ("maml", "lirpg"):
            raise ValueError(f"variant must be 'maml' or 'lirpg', got {cfg['variant']!r}")
        for mode in cfg.get("modes", []):
            _lola_paths(mode)
        for fig in cfg["figures"]:
            if fig not in FIGURES:
                raise ValueError(f"unknown figure {fig!r}")
        if cfg["experiment"] == "lola":
            _lola_config(cfg, cfg["inner_batches"][0])
            if cfg["n_seeds"] < 1 or cfg["curve_every"] < 1:
                raise ValueError("n_seeds and curve_every must be positive")
        else:
            if cfg["n_mdps"] < 1 or cfg["n_trials"] < 1:
                raise ValueError("n_mdps and n_trials must be positive")
            if any(j < 0 or j >= cfg["n_mdps"] for j in cfg["mdp_indices"] or []):
                raise ValueError("mdp_indices must lie in [0, n_mdps)")
            _mdp_spec(cfg)
            for k in cfg["k_steps"]:
                InnerLoopConfig(k)
            for b in cfg.get("batch_sizes", []) + [cfg.get("batch_size", 1)]:
                EstimatorKind("lvc", b)
    except ValueError as err:
        raise ConfigError(str(err)) from None


def format_config(cfg: dict) -> str:
    lines = [f"experiment = {cfg['experiment']}"]
    lines += [f"{k} = {json.dumps(cfg[k])}" for k in sorted(cfg) if k != "experiment"]
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    core = {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# sweep points


def _mdp_spec(cfg):
    return MdpSpec(cfg["n_states"], cfg["n_actions"], cfg["density"], cfg["horizon"],
                   cfg["discount"])


def _indices(cfg):
    return cfg["mdp_indices"] if cfg["mdp_indices"] is not None else list(range(cfg["n_mdps"]))


def _lola_paths(mode):
    if mode in _MODES:
        return LolaPaths.from_mode(mode)
    parts = str(mode).split("-")
    if len(parts) != 3:
        raise ValueError(f"mode must be one of {_MODES} or 'inner-cross-outer', got {mode!r}")
    return LolaPaths(*parts)


def _lola_config(cfg, inner_batch):
    return LolaConfig(outer_lr=cfg["outer_lr"], inner_lr=cfg["inner_lr"], discount=cfg["discount"],
                      rollout_length=cfg["rollout_length"], n_updates=cfg["n_updates"],
                      value_lr=cfg["value_lr"], buffer_capacity=cfg["buffer_capacity"],
                      buffer_sample=cfg["buffer_sample"], inner_batch=inner_batch,
                      outer_batch=cfg["outer_batch"], optimizer=cfg["optimizer"], clip=cfg["clip"],
                      normalize_weights=cfg["normalize_weights"])


def _lola_seeds(cfg):
    return cfg["seeds"] if cfg["seeds"] is not None else \
        list(range(cfg["seed"], cfg["seed"] + cfg["n_seeds"]))


def _tasks(cfg) -> list:
    name = cfg["experiment"]
    if name in ("maml-ablation", "lirpg-ablation"):
        return [dict(kind=kind, k_steps=k, learning_rate=a, code=code, batch_size=b)
                for kind in cfg["kinds"] for k in cfg["k_steps"] for a in cfg["learning_rates"]
                for code in cfg["codes"] for b in cfg["batch_sizes"]]
    if name == "bias-scaling":
        return [dict(k_steps=k, learning_rate=a, batch_size=b)
                for k in cfg["k_steps"] for a in cfg["learning_rates"] for b in cfg["batch_sizes"]]
    if name == "hessian-injection":
        return [dict(k_steps=k, learning_rate=a, injection=c)
                for k in cfg["k_steps"] for a in cfg["learning_rates"] for c in cfg["coefficients"]]
    return [dict(mode=m, inner_batch=b, seed=s)
            for m in cfg["modes"] for b in cfg["inner_batches"] for s in _lola_seeds(cfg)]


def _evaluate(args):
    """Compute one sweep point; module-level so worker processes can run it."""
    cfg, task = args
    name = cfg["experiment"]
    if name == "lola":
        run = run_lola_experiment(_lola_config(cfg, task["inner_batch"]), mode=None,
                                  paths=_lola_paths(task["mode"]), seeds=[task["seed"]])
        return {"returns": run.returns[0]}

    variant = "lirpg" if name == "lirpg-ablation" else cfg.get("variant", "maml")
    inject = task.get("injection", 0.0)
    inner = InnerLoopConfig(task["k_steps"], task["learning_rate"], inject,
                            cfg.get("perturbation_seed", 0), cfg["noise_coefficient"])
    if "code" in task:
        code, kind, batch = task["code"], task["kind"], task["batch_size"]
    elif "batch_size" in task:
        code, kind, batch = cfg["code"], cfg["kind"], task["batch_size"]
    else:
        code, kind, batch = cfg["code"], cfg["kind"], cfg["batch_size"]
    assignment = EstimatorAssignment.from_code(code, kind, batch)
    indices = _indices(cfg)
    rep = measure(variant, inner, assignment, n_repeat_trials=cfg["n_trials"], seed=cfg["seed"],
                  mdp_spec=_mdp_spec(cfg), mdp_indices=indices)
    out = {"per_mdp": [(r.bias_norm, r.variance, r.mean_correlation) for r in rep.per_mdp]}
    if name == "bias-scaling":
        spec = _mdp_spec(cfg)
        comp = []
        for j in indices:
            mdp = spec.generate(mdp_seed(cfg["seed"], j))
            problem = MetaProblem.maml(mdp) if variant == "maml" else MetaProblem.lirpg(mdp)
            comp.append(measure_compositional_bias(problem, inner, batch, cfg["n_trials"],
                                                   cfg["seed"], kind))
        out["compositional"] = comp
    return out


def _base_row(cfg, h, **values):
    row = dict.fromkeys(FIELDS)
    row.update(experiment=cfg["experiment"], config_hash=h, **values)
    return row


def _rows(cfg, tasks, results) -> list:
    h = config_hash(cfg)
    name = cfg["experiment"]
    rows = []
    if name == "lola":
        groups = {}
        for task, res in zip(tasks, results):
            groups.setdefault((task["mode"], task["inner_batch"]), []).append((task, res))
        for (mode, batch), items in groups.items():
            code = _lola_paths(mode).code
            curves = np.array([res["returns"] for _, res in items])
            finals = curves[:, -10:].mean(axis=1)
            common = dict(mode=code, inner_batch=batch, n_trials=len(items))
            for (task, _), final in zip(items, finals):
                rows.append(_base_row(cfg, h, aggregation="seed", seed=task["seed"],
                                      mean_return=float(final), **common))
            rows.append(_base_row(cfg, h, aggregation="mean", seed=cfg["seed"],
                                  mean_return=float(finals.mean()), **common))
            mean_curve = curves.mean(axis=0)
            for u in range(0, len(mean_curve), cfg["curve_every"]):
                rows.append(_base_row(cfg, h, aggregation="curve", seed=cfg["seed"], update=u,
                                      mean_return=float(mean_curve[u]), **common))
        return rows

    variant = "lirpg" if name == "lirpg-ablation" else cfg.get("variant", "maml")
    indices = _indices(cfg)
    for task, res in zip(tasks, results):
        coords = dict(variant=variant, k_steps=task["k_steps"], learning_rate=task["learning_rate"],
                      code=task.get("code", cfg.get("code")), kind=task.get("kind", cfg.get("kind")),
                      batch_size=task.get("batch_size", cfg.get("batch_size")),
                      injection=task.get("injection"), seed=cfg["seed"], n_trials=cfg["n_trials"])
        comp = res.get("compositional")
        per = np.array(res["per_mdp"])
        for i, j in enumerate(indices):
            rows.append(_base_row(cfg, h, aggregation="mdp", mdp_index=j, n_mdps=1,
                                  bias_norm=per[i, 0], variance=per[i, 1],
                                  mean_correlation=per[i, 2],
                                  compositional_bias=None if comp is None else comp[i], **coords))
        rows.append(_base_row(cfg, h, aggregation="mean", n_mdps=len(indices),
                              bias_norm=per[:, 0].mean(), variance=per[:, 1].mean(),
                              mean_correlation=per[:, 2].mean(),
                              compositional_bias=None if comp is None else float(np.mean(comp)),
                              **coords))
    if name == "bias-scaling":
        rows += _slope_rows(cfg, h, rows)
    return rows


def _slope_rows(cfg, h, rows):
    """Least-squares slope of log metric against log batch size, per (K, alpha)."""
    out = []
    for k in cfg["k_steps"]:
        for a in cfg["learning_rates"]:
            pts = [r for r in rows if r["aggregation"] == "mean" and r["k_steps"] == k
                   and r["learning_rate"] == a]
            if len(pts) < 2:
                continue
            x = np.log([r["batch_size"] for r in pts])
            for metric in ("compositional_bias", "bias_norm"):
                y = np.array([r[metric] for r in pts], dtype=np.float64)
                if np.all(y > 0):
                    out.append(_base_row(cfg, h, aggregation=f"slope:{metric}",
                                         variant=pts[0]["variant"], code=cfg["code"],
                                         kind=cfg["kind"], k_steps=k, learning_rate=a,
                                         seed=cfg["seed"], n_mdps=pts[0]["n_mdps"],
                                         n_trials=cfg["n_trials"],
                                         slope=float(np.polyfit(x, np.log(y), 1)[0])))
    return out


def run_experiment(cfg: dict, threads: int = 1, progress: Optional[Callable] = None) -> list:
    """Evaluate every sweep point and return the rows in sweep order."""
    tasks = _tasks(cfg)
    jobs = [(cfg, t) for t in tasks]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_evaluate, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_evaluate(job))
            if progress:
                progress(i + 1, len(jobs))
    rows = _rows(cfg, tasks, results)
    for row in rows:
        for key, v in row.items():
            if isinstance(v, float) and not np.isfinite(v):
                raise ValueError(f"non-finite {key} in row {row}")
    return rows


# ---------------------------------------------------------------------------
# CSV


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if _is_int(v):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(rows, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in rows:
        w.writerow([_cell(r.get(f)) for f in FIELDS])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# figures


@dataclass(frozen=True)
class FigureSpec:
    experiment: str
    title: str
    x: str
    y: str
    series: tuple
    aggregation: str = "mean"
    logx: bool = False
    logy: bool = False
    select: Optional[Callable] = None


def _mode_has(*parts):
    return lambda r: any(p in r["mode"].split("-") for p in parts) or r["mode"] == "on-on-on"


FIGURES = {
    "fig2a": FigureSpec("maml-ablation", "MAML correlation, LVC", "batch_size", "mean_correlation",
                        ("code",), logx=True, select=lambda r: r["kind"] == "lvc"),
    "fig2b": FigureSpec("maml-ablation", "MAML correlation, AD", "batch_size", "mean_correlation",
                        ("code",), logx=True, select=lambda r: r["kind"] == "ad"),
    "fig2c": FigureSpec("lirpg-ablation", "LIRPG correlation vs batch", "batch_size",
                        "mean_correlation", ("kind", "code", "k_steps"), logx=True),
    "fig2d": FigureSpec("lirpg-ablation", "LIRPG correlation vs steps", "k_steps",
                        "mean_correlation", ("kind", "code", "batch_size")),
    "fig3a": FigureSpec("bias-scaling", "Meta-gradient bias vs steps", "k_steps", "bias_norm",
                        ("batch_size", "learning_rate"), logy=True),
    "fig3b": FigureSpec("bias-scaling", "Meta-gradient bias vs learning rate", "learning_rate",
                        "bias_norm", ("k_steps", "batch_size"), logx=True, logy=True),
    "fig3c": FigureSpec("bias-scaling", "Compositional bias vs batch", "batch_size",
                        "compositional_bias", ("k_steps", "learning_rate"), logx=True, logy=True),
    "fig3d": FigureSpec("hessian-injection", "Meta-gradient bias vs Hessian error", "injection",
                        "bias_norm", ("k_steps", "learning_rate")),
    "fig4a": FigureSpec("lola", "LOLA return", "update", "mean_return", ("mode", "inner_batch"),
                        aggregation="curve"),
    "fig4b": FigureSpec("lola", "LOLA final return vs inner batch", "inner_batch", "mean_return",
                        ("mode",), logx=True),
    "fig4c": FigureSpec("lola", "LOLA return, exact paths", "update", "mean_return",
                        ("mode", "inner_batch"), aggregation="curve", select=_mode_has("exact")),
    "fig4d": FigureSpec("lola", "LOLA return, off-policy", "update", "mean_return",
                        ("mode", "inner_batch"), aggregation="curve", select=_mode_has("off")),
}


def _num(v):
    return float(v)


def figure_series(rows, figure: str) -> tuple:
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; expected one of {sorted(FIGURES)}")
    spec = FIGURES[figure]
    needed = {"experiment", "aggregation", spec.x, spec.y, *spec.series}
    if rows:
        missing = sorted(needed - set(rows[0]))
        if missing:
            raise ValueError(f"{figure} needs columns missing from the CSV: {', '.join(missing)}")
    picked = [r for r in rows if r["experiment"] == spec.experiment
              and r["aggregation"] == spec.aggregation and r[spec.x] != "" and r[spec.y] != ""
              and (spec.select is None or spec.select(r))]
    if not picked:
        raise ValueError(f"{figure}: no {spec.experiment} rows to plot")
    varying = [c for c in spec.series if len({r[c] for r in picked}) > 1] or list(spec.series)
    groups = {}
    for r in picked:
        label = ", ".join(f"{c}={r[c]}" for c in varying)
        groups.setdefault(label, []).append((_num(r[spec.x]), _num(r[spec.y])))
    series = [Series(label, [p[0] for p in pts], [p[1] for p in pts])
              for label, pts in groups.items()]
    return spec, series


def render_figure(rows, figure: str) -> str:
    spec, series = figure_series(rows, figure)
    return line_chart(series, f"{figure}: {spec.title}", spec.x, spec.y, spec.logx, spec.logy)
