"""Declarative experiment configuration.

JSON in, validated and normalized config out: unknown keys are rejected
with the offending path, types are checked, defaults are filled, and the
blocks resolve to model / driver / terminal / obstacle / weight objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SchemaError
from .model import (JumpMeasure, ObstacleSpec, WeightFunction,
                    borrowing_rate_driver, discount_driver, named_model,
                    scalar_model, zero_driver)

__all__ = ["ExperimentConfig", "validate_config", "TASKS"]

TASKS = ("simulate", "solve", "solve-obstacle", "oracle", "normcheck", "compare")

_NUMERIC_DEFAULTS = {
    "grid_n": 50,
    "paths": 100_000,
    "x0": 0.0,
    "x0_spread": 0.0,
    "picard": 3,
    "tol": 1e-3,
    "schedule_max_exp": 12,
    "dump_paths": "none",
}
_BASIS_DEFAULTS = {"kind": "poly", "degree": 4, "cells": 40, "box": None}


def _type_name(v):
    return type(v).__name__


def _expect(value, types, path):
    if not isinstance(value, types):
        wanted = "/".join(t.__name__ for t in (types if isinstance(types, tuple) else (types,)))
        raise SchemaError(f"{path}: expected {wanted}, got {_type_name(value)}")
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise SchemaError(f"{path}: expected number, got bool")
    return value


def _expect_num(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{path}: expected number, got {_type_name(value)}")
    return float(value)


def _check_keys(block, allowed, path):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key at {path}.{key}" if path else f"unknown key {key}")


@dataclass
class ExperimentConfig:
    """Normalized experiment description; builders resolve the blocks."""

    task: str
    seed: int
    raw: dict

    @property
    def numerics(self):
        return self.raw["numerics"]

    @property
    def weight_exponent(self):
        return self.raw["weight"]["p"]

    def canonical_json(self):
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def build_model(self):
        block = self.raw["model"]
        if block["name"] != "custom":
            return named_model(block["name"], **block.get("params", {}))
        return _build_custom_model(block.get("params", {}))

    def build_driver(self):
        block = self.raw.get("driver") or {"name": "zero", "params": {}}
        name, params = block["name"], dict(block.get("params", {}))
        if name == "zero":
            return zero_driver()
        if name == "discount":
            return discount_driver(params.get("rate", 0.0))
        if name == "borrowing":
            return borrowing_rate_driver(params.get("rate", 0.0),
                                         params.get("borrow_rate", 0.0),
                                         params.get("risk_premium", 0.0))
        raise ConfigError(f"unknown driver preset {name!r}")

    def build_terminal(self):
        block = self.raw["terminal"]
        return _build_payoff(block["name"], dict(block.get("params", {})),
                             "terminal")

    def build_obstacle(self):
        block = self.raw.get("obstacle")
        if block is None:
            return None
        fn = _build_payoff(block["name"], dict(block.get("params", {})), "obstacle")
        params = block.get("params", {})
        return ObstacleSpec(h=lambda t, X: fn(X), iota=params.get("iota", 1.0 + params.get("strike", 1.0)),
                            kappa=params.get("kappa", 1.0))

    def build_weight(self):
        return WeightFunction(self.raw["weight"]["p"])

    def schedule(self):
        num = self.numerics
        if num.get("schedule"):
            return tuple(num["schedule"])
        return tuple(2**k for k in range(num["schedule_max_exp"] + 1))


def _build_payoff(name, params, path):
    strike = params.get("strike", 1.0)
    if name == "square":
        return lambda X: X[:, 0] ** 2
    if name == "constant":
        value = params.get("value", 0.0)
        return lambda X: np.full(X.shape[0], float(value))
    if name == "call":
        return lambda X: np.maximum(X[:, 0] - strike, 0.0)
    if name == "put":
        return lambda X: np.maximum(strike - X[:, 0], 0.0)
    if name == "exp-call":
        return lambda X: np.maximum(np.exp(X[:, 0]) - strike, 0.0)
    if name == "exp-put":
        return lambda X: np.maximum(strike - np.exp(X[:, 0]), 0.0)
    raise ConfigError(f"unknown {path} preset {name!r}")


def _build_custom_model(params):
    def coef(spec, default_slope, default_icpt, path):
        if spec is None:
            return lambda x: default_slope * x + default_icpt
        slope = spec.get("slope", 0.0)
        icpt = spec.get("intercept", 0.0)
        return lambda x: slope * x + icpt

    drift = coef(params.get("drift"), 0.0, 0.0, "drift")
    diffusion = coef(params.get("diffusion"), 0.0, 1.0, "diffusion")
    measure_spec = params.get("measure")
    jump_kind = params.get("jump", "none")
    measure = JumpMeasure.none()
    jump = None
    if measure_spec and jump_kind != "none":
        kind = measure_spec.get("kind", "uniform")
        intensity = measure_spec.get("intensity", 1.0)
        if kind == "uniform":
            measure = JumpMeasure.uniform(measure_spec.get("lo", -1.0),
                                          measure_spec.get("hi", 1.0), intensity)
        elif kind == "gaussian":
            measure = JumpMeasure.gaussian(measure_spec.get("mean", 0.0),
                                           measure_spec.get("sd", 1.0), intensity)
        elif kind == "two-point":
            measure = JumpMeasure.two_point(measure_spec.get("down", -0.1),
                                            measure_spec.get("up", 0.1),
                                            measure_spec.get("p_up", 0.5), intensity)
        else:
            raise ConfigError(f"unknown measure kind {kind!r}")
        if jump_kind == "translation":
            jump = lambda x, e: np.broadcast_to(e, x.shape).astype(float)
        elif jump_kind == "proportional-exp":
            jump = lambda x, e: x * (np.exp(e) - 1.0)
        else:
            raise ConfigError(f"unknown jump kind {jump_kind!r}")
    return scalar_model(drift=drift, diffusion=diffusion, jump=jump,
                        jump_measure=measure,
                        k_jump=params.get("k_jump", 4.0),
                        k_coef=params.get("k_coef", 1.0))


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

_TOP_KEYS = {"task", "seed", "output", "model", "driver", "terminal", "obstacle",
             "weight", "numerics", "oracle", "normcheck", "compare"}


def validate_config(raw):
    """Validate raw JSON (text or dict) into an ExperimentConfig.

    Rejects unknown keys with their path, checks types, injects documented
    defaults (grid_n=50, paths=1e5, degree-4 polynomial basis), and enforces
    the weight-exponent floor p >= kappa + dim + 1 for obstacle tasks.
    """
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"config is not valid JSON: {exc}") from None
    _expect(raw, dict, "config")
    _check_keys(raw, _TOP_KEYS, "")

    task = _expect(raw.get("task"), str, "task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    if "seed" not in raw:
        raise ConfigError("seed is required (no silent nondeterminism)")
    seed = raw["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise SchemaError(f"seed: expected int, got {_type_name(seed)}")

    out = {"task": task, "seed": seed}
    if "output" in raw:
        out["output"] = _expect(raw["output"], str, "output")

    out["model"] = _norm_model(raw.get("model"), task)
    if "driver" in raw:
        out["driver"] = _norm_named_block(raw["driver"], "driver",
                                          {"zero", "discount", "borrowing"})
    if "terminal" in raw:
        out["terminal"] = _norm_named_block(raw["terminal"], "terminal",
                                            {"square", "constant", "call", "put",
                                             "exp-call", "exp-put"})
    if "obstacle" in raw:
        out["obstacle"] = _norm_named_block(raw["obstacle"], "obstacle",
                                            {"call", "put", "exp-call", "exp-put",
                                             "constant"})
    weight_block = raw.get("weight", {"p": 4.0})
    _expect(weight_block, dict, "weight")
    _check_keys(weight_block, {"p"}, "weight")
    out["weight"] = {"p": _expect_num(weight_block.get("p", 4.0), "weight.p")}

    out["numerics"] = _norm_numerics(raw.get("numerics", {}))

    if "oracle" in raw:
        out["oracle"] = _norm_oracle(raw["oracle"])
    if "normcheck" in raw:
        out["normcheck"] = _norm_normcheck(raw["normcheck"])
    if "compare" in raw:
        out["compare"] = _norm_compare(raw["compare"])

    _check_task_requirements(task, out)
    return ExperimentConfig(task=task, seed=seed, raw=out)


def _norm_model(block, task):
    if block is None:
        if task == "oracle":
            return {"name": "bs", "params": {}}
        raise ConfigError("model block is required")
    _expect(block, dict, "model")
    _check_keys(block, {"name", "params"}, "model")
    name = _expect(block.get("name"), str, "model.name")
    known = {"bs", "merton", "kou", "toy-uniform", "custom"}
    if name not in known:
        raise ConfigError(f"model.name must be one of {sorted(known)}, got {name!r}")
    params = block.get("params", {})
    _expect(params, dict, "model.params")
    return {"name": name, "params": params}


def _norm_named_block(block, path, known):
    _expect(block, dict, path)
    _check_keys(block, {"name", "params"}, path)
    name = _expect(block.get("name"), str, f"{path}.name")
    if name not in known:
        raise ConfigError(f"{path}.name must be one of {sorted(known)}, got {name!r}")
    params = block.get("params", {})
    _expect(params, dict, f"{path}.params")
    for key, val in params.items():
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise SchemaError(f"{path}.params.{key}: expected number, got {_type_name(val)}")
    return {"name": name, "params": dict(params)}


def _norm_numerics(block):
    _expect(block, dict, "numerics")
    allowed = set(_NUMERIC_DEFAULTS) | {"basis", "schedule", "eval_points"}
    _check_keys(block, allowed, "numerics")
    num = dict(_NUMERIC_DEFAULTS)
    for key in ("grid_n", "paths", "picard", "schedule_max_exp"):
        if key in block:
            val = block[key]
            if isinstance(val, bool) or not isinstance(val, int):
                raise SchemaError(f"numerics.{key}: expected int, got {_type_name(val)}")
            if val < 1:
                raise ConfigError(f"numerics.{key} must be >= 1")
            num[key] = val
    for key in ("x0", "x0_spread", "tol"):
        if key in block:
            num[key] = _expect_num(block[key], f"numerics.{key}")
    if num["tol"] <= 0:
        raise ConfigError("numerics.tol must be positive")
    if "dump_paths" in block:
        v = _expect(block["dump_paths"], str, "numerics.dump_paths")
        if v not in ("none", "csv", "binary"):
            raise ConfigError("numerics.dump_paths must be none|csv|binary")
        num["dump_paths"] = v
    if "schedule" in block:
        sched = _expect(block["schedule"], list, "numerics.schedule")
        vals = []
        for i, v in enumerate(sched):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or v <= 0:
                raise SchemaError(f"numerics.schedule[{i}]: expected positive number")
            vals.append(float(v))
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError("numerics.schedule must be increasing")
        num["schedule"] = vals
    if "eval_points" in block:
        val = block["eval_points"]
        if isinstance(val, bool) or not isinstance(val, int) or val < 2:
            raise SchemaError("numerics.eval_points: expected int >= 2")
        num["eval_points"] = val
    basis = dict(_BASIS_DEFAULTS)
    if "basis" in block:
        bb = _expect(block["basis"], dict, "numerics.basis")
        _check_keys(bb, set(_BASIS_DEFAULTS), "numerics.basis")
        if "kind" in bb:
            if bb["kind"] not in ("poly", "local"):
                raise ConfigError("numerics.basis.kind must be poly|local")
            basis["kind"] = bb["kind"]
        for key in ("degree", "cells"):
            if key in bb:
                val = bb[key]
                if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                    raise SchemaError(f"numerics.basis.{key}: expected int >= 1")
                basis[key] = val
        if bb.get("box") is not None:
            box = _expect(bb["box"], list, "numerics.basis.box")
            if len(box) != 2:
                raise SchemaError("numerics.basis.box: expected [lo, hi]")
            basis["box"] = [_expect_num(box[0], "numerics.basis.box[0]"),
                            _expect_num(box[1], "numerics.basis.box[1]")]
    num["basis"] = basis
    return num


def _norm_oracle(block):
    _expect(block, dict, "oracle")
    allowed = {"kind", "strike", "s0", "rate", "sigma", "horizon", "steps",
               "option", "intensity", "jump_mean", "jump_sd", "n_terms",
               "x_lo", "x_hi", "n_space", "n_time", "bc"}
    _check_keys(block, allowed, "oracle")
    kind = _expect(block.get("kind"), str, "oracle.kind")
    if kind not in ("fd", "merton", "binomial"):
        raise ConfigError("oracle.kind must be fd|merton|binomial")
    out = {"kind": kind}
    for key in allowed - {"kind", "option", "bc", "steps", "n_space", "n_time", "n_terms"}:
        if key in block:
            out[key] = _expect_num(block[key], f"oracle.{key}")
    for key in ("steps", "n_space", "n_time", "n_terms"):
        if key in block:
            val = block[key]
            if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                raise SchemaError(f"oracle.{key}: expected int >= 1")
            out[key] = val
    if "option" in block:
        opt = _expect(block["option"], str, "oracle.option")
        if opt not in ("call", "put"):
            raise ConfigError("oracle.option must be call|put")
        out["option"] = opt
    if "bc" in block:
        bc = _expect(block["bc"], str, "oracle.bc")
        if bc not in ("dirichlet", "linear"):
            raise ConfigError("oracle.bc must be dirichlet|linear")
        out["bc"] = bc
    return out


def _norm_normcheck(block):
    _expect(block, dict, "normcheck")
    _check_keys(block, {"radius", "n_panels", "nodes_per_panel", "s_list"}, "normcheck")
    out = {"radius": 9.0, "n_panels": 18, "nodes_per_panel": 8, "s_list": [0.1, 0.5, 1.0]}
    if "radius" in block:
        out["radius"] = _expect_num(block["radius"], "normcheck.radius")
    for key in ("n_panels", "nodes_per_panel"):
        if key in block:
            val = block[key]
            if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                raise SchemaError(f"normcheck.{key}: expected int >= 1")
            out[key] = val
    if "s_list" in block:
        sl = _expect(block["s_list"], list, "normcheck.s_list")
        out["s_list"] = [_expect_num(v, f"normcheck.s_list[{i}]") for i, v in enumerate(sl)]
    return out


def _norm_compare(block):
    _expect(block, dict, "compare")
    _check_keys(block, {"oracle", "tol_rel", "region", "x_grid_n"}, "compare")
    if "oracle" not in block:
        raise ConfigError("compare.oracle is required")
    out = {"oracle": _norm_oracle(block["oracle"]),
           "tol_rel": _expect_num(block.get("tol_rel", 0.01), "compare.tol_rel")}
    if out["tol_rel"] <= 0:
        raise ConfigError("compare.tol_rel must be positive")
    region = block.get("region")
    if region is not None:
        region = _expect(region, list, "compare.region")
        if len(region) != 2:
            raise SchemaError("compare.region: expected [lo, hi]")
        out["region"] = [_expect_num(region[0], "compare.region[0]"),
                         _expect_num(region[1], "compare.region[1]")]
    if "x_grid_n" in block:
        val = block["x_grid_n"]
        if isinstance(val, bool) or not isinstance(val, int) or val < 1:
            raise SchemaError("compare.x_grid_n: expected int >= 1")
        out["x_grid_n"] = val
    else:
        out["x_grid_n"] = 1
    return out


def _check_task_requirements(task, out):
    def need(block):
        if block not in out:
            raise ConfigError(f"task {task!r} requires a {block} block")

    if task in ("solve", "solve-obstacle", "compare"):
        need("terminal")
        need("driver")
    if task == "solve-obstacle":
        need("obstacle")
    if task == "compare":
        need("compare")
    if task == "oracle":
        need("oracle")
    if task in ("solve-obstacle",) or (task == "compare" and "obstacle" in out):
        kappa = out["obstacle"].get("params", {}).get("kappa", 1.0)
        dim = 1
        floor = kappa + dim + 1
        if out["weight"]["p"] < floor - 1e-12:
            raise ConfigError(
                f"weight.p = {out['weight']['p']} below the obstacle floor "
                f"kappa + dim + 1 = {floor}; raise the weight exponent")
