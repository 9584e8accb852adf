"""JSON encoding of the experiment vocabulary: processes, measures, jump
functions, potentials, envelope families, and experiment configs.

Validation is strict: unknown keys are rejected everywhere so that configs
stay reproducible across versions.
"""

from __future__ import annotations

import json
import math
from typing import Optional

from .envelopes import ENVELOPE_KINDS, EnvelopeFamily, ScalingFunction, VolumeFunction
from .errors import ConfigError
from .functionals import JumpPerturbation, MeasureSpec, PotentialU
from .processes import PROCESS_KINDS, ProcessSpec

__all__ = [
    "scaling_from_json",
    "scaling_to_json",
    "envelope_from_json",
    "envelope_to_json",
    "measure_from_json",
    "measure_to_json",
    "jump_from_json",
    "potential_from_json",
    "process_from_json",
    "process_to_json",
    "load_config",
    "CONFIG_SCHEMA_VERSION",
]

CONFIG_SCHEMA_VERSION = 1

_DENSITY_KINDS = {
    "uniform_ball": {"c", "radius"},
    "power": {"c", "exponent", "radius"},
    "gaussian_bump": {"c", "sigma", "radius"},
}
_DENSITY_REQUIRED = {
    "uniform_ball": {"c", "radius"},
    "power": {"c", "exponent", "radius"},
    "gaussian_bump": {"c", "sigma"},
}


def _check_keys(obj: dict, allowed: set, required: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


# ---------------------------------------------------------------------------
# scale functions and envelope families
# ---------------------------------------------------------------------------


def scaling_from_json(obj: dict, where: str = "phi") -> ScalingFunction:
    _check_keys(obj, {"form", "beta", "scale", "points"}, {"form"}, where)
    if obj["form"] == "power":
        _check_keys(obj, {"form", "beta", "scale"}, {"form", "beta"}, where)
        return ScalingFunction.power(float(obj["beta"]), float(obj.get("scale", 1.0)))
    if obj["form"] == "table":
        _check_keys(obj, {"form", "points"}, {"form", "points"}, where)
        return ScalingFunction.from_table(obj["points"])
    raise ConfigError(f"{where}: unknown form {obj['form']!r}")


def scaling_to_json(s: ScalingFunction) -> dict:
    if s.beta_lower == s.beta_upper and s.label.startswith("r^"):
        return {"form": "power", "beta": s.beta_lower}
    probe = [0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0]
    return {"form": "table", "points": [[r, s.eval(r)] for r in probe]}


def envelope_from_json(obj: dict) -> EnvelopeFamily:
    _check_keys(obj, {"kind", "phi", "psi", "dim", "beta_temper", "a0", "eta", "eps_nle"},
                {"kind", "phi", "dim"}, "envelope")
    if obj["kind"] not in ENVELOPE_KINDS:
        raise ConfigError(f"envelope: unknown kind {obj['kind']!r}")
    beta = obj.get("beta_temper", "inf")
    beta = math.inf if beta == "inf" else float(beta)
    return EnvelopeFamily(
        kind=obj["kind"],
        phi=scaling_from_json(obj["phi"], "envelope.phi"),
        psi=scaling_from_json(obj["psi"], "envelope.psi") if obj.get("psi") else None,
        volume=VolumeFunction.lebesgue(int(obj["dim"])),
        beta=beta,
        a0=float(obj.get("a0", 1.0)),
        eta=float(obj.get("eta", 1.0)),
        eps_nle=float(obj.get("eps_nle", 1.0)),
    )


def envelope_to_json(fam: EnvelopeFamily) -> dict:
    out = {
        "kind": fam.kind,
        "phi": scaling_to_json(fam.phi),
        "dim": fam.volume.dim,
        "beta_temper": "inf" if math.isinf(fam.beta) else fam.beta,
        "a0": fam.a0,
        "eta": fam.eta,
        "eps_nle": fam.eps_nle,
    }
    if fam.psi is not None:
        out["psi"] = scaling_to_json(fam.psi)
    return out


# ---------------------------------------------------------------------------
# measures, jump functions, potentials
# ---------------------------------------------------------------------------


def _density_from_json(obj: Optional[dict], where: str):
    if obj is None:
        return None
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ConfigError(f"{where}: expected one named density")
    kind, params = next(iter(obj.items()))
    if kind not in _DENSITY_KINDS:
        raise ConfigError(f"{where}: unknown density {kind!r}")
    _check_keys(params, _DENSITY_KINDS[kind], _DENSITY_REQUIRED[kind], f"{where}.{kind}")
    return (kind, {k: float(v) for k, v in params.items()})


def measure_from_json(obj: Optional[dict], where: str = "mu") -> MeasureSpec:
    if obj is None:
        return MeasureSpec.zero()
    _check_keys(obj, {"pos", "neg", "label"}, set(), where)
    pos = _density_from_json(obj.get("pos"), f"{where}.pos")
    neg = _density_from_json(obj.get("neg"), f"{where}.neg")
    if pos is None and neg is None:
        return MeasureSpec.zero(label=obj.get("label", "zero"))
    return MeasureSpec.from_parts(pos, neg, label=obj.get("label", ""))


def measure_to_json(mu: MeasureSpec) -> Optional[dict]:
    # measures are built from the named library; reserialization keeps the label only
    if mu.is_zero:
        return None
    return {"label": mu.label or "custom"}


def jump_from_json(obj: Optional[dict]) -> Optional[JumpPerturbation]:
    if obj is None:
        return None
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ConfigError("F: expected one named jump function")
    kind, params = next(iter(obj.items()))
    if kind != "threshold":
        raise ConfigError(f"F: unknown jump function {kind!r}")
    _check_keys(params, {"eps", "min_jump"}, {"eps", "min_jump"}, "F.threshold")
    return JumpPerturbation.threshold(float(params["eps"]), float(params["min_jump"]))


def potential_from_json(obj: Optional[dict]) -> Optional[dict]:
    """Potentials need a process to build their tables; return the parsed recipe."""
    if obj is None:
        return None
    if not isinstance(obj, dict) or len(obj) != 1:
        raise ConfigError("u: expected one named potential")
    kind, params = next(iter(obj.items()))
    if kind == "resolvent_potential":
        _check_keys(params, {"nu1", "nu2", "alpha"}, {"alpha"}, "u.resolvent_potential")
        return {
            "kind": kind,
            "nu1": measure_from_json(params.get("nu1"), "u.nu1"),
            "nu2": measure_from_json(params.get("nu2"), "u.nu2"),
            "alpha": float(params["alpha"]),
        }
    if kind == "ell_beta":
        _check_keys(params, {"beta", "eps"}, {"beta"}, "u.ell_beta")
        return {"kind": kind, "beta": float(params["beta"]), "eps": float(params.get("eps", 1e-3))}
    raise ConfigError(f"u: unknown potential {kind!r}")


# ---------------------------------------------------------------------------
# processes and experiment configs
# ---------------------------------------------------------------------------


def process_from_json(obj: dict) -> ProcessSpec:
    _check_keys(obj, {"kind", "dim", "alpha_stable_index", "kill_rate", "jump_cutoff"},
                {"kind"}, "process")
    if obj["kind"] not in PROCESS_KINDS:
        raise ConfigError(f"process: unknown kind {obj['kind']!r}")
    return ProcessSpec(
        kind=obj["kind"],
        dim=int(obj.get("dim", 1)),
        alpha_stable_index=(float(obj["alpha_stable_index"])
                            if obj.get("alpha_stable_index") is not None else None),
        kill_rate=float(obj.get("kill_rate", 0.0)),
        jump_cutoff=(float(obj["jump_cutoff"]) if obj.get("jump_cutoff") is not None else None),
    )


def process_to_json(spec: ProcessSpec) -> dict:
    out = {"kind": spec.kind, "dim": spec.dim}
    if spec.alpha_stable_index is not None:
        out["alpha_stable_index"] = spec.alpha_stable_index
    if spec.kill_rate:
        out["kill_rate"] = spec.kill_rate
    if spec.jump_cutoff is not None:
        out["jump_cutoff"] = spec.jump_cutoff
    return out


_CONFIG_KEYS = {
    "schema", "mode", "process", "u", "mu", "F", "envelope", "alpha", "mesh",
    "n_paths", "seed", "t_values", "pairs", "output_dir", "tuning", "op",
}
_TUNING_KEYS = {
    "dt", "bandwidth", "r_cut", "radii", "allow_k", "gauge_points", "resolvent_horizon",
    "resolvent_probes", "alpha_ladder", "kato_grid", "threads", "ci_factor", "slope_tol",
    "mesh_ladder",
}
_MODES = ("theorem_1_3", "corollary_1_5", "theorem_1_7", "single_op")


def load_config(path_or_dict) -> dict:
    """Parse and validate an experiment config; returns a normalized dict."""
    if isinstance(path_or_dict, (str, bytes)):
        with open(path_or_dict) as f:
            raw = json.load(f)
    else:
        raw = path_or_dict
    if isinstance(raw, dict) and raw.get("_normalized"):
        return raw
    _check_keys(raw, _CONFIG_KEYS, {"schema", "mode"}, "config")
    if raw["schema"] != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config: unsupported schema {raw['schema']!r}")
    if raw["mode"] not in _MODES:
        raise ConfigError(f"config: unknown mode {raw['mode']!r}")
    tuning = raw.get("tuning", {}) or {}
    _check_keys(tuning, _TUNING_KEYS, set(), "config.tuning")

    cfg = {
        "_normalized": True,
        "mode": raw["mode"],
        "seed": int(raw.get("seed", 0)),
        "n_paths": int(raw.get("n_paths", 10000)),
        "alpha": float(raw.get("alpha", 0.0)),
        "t_values": [float(t) for t in raw.get("t_values", [0.5, 1.0, 2.0])],
        "pairs": raw.get("pairs"),
        "mesh": None,
        "output_dir": raw.get("output_dir", "fklab_out"),
        "tuning": tuning,
        "op": raw.get("op"),
    }
    if raw["mode"] != "single_op":
        if "process" not in raw:
            raise ConfigError("config: mode needs a process")
        cfg["process"] = process_from_json(raw["process"])
        cfg["mu"] = measure_from_json(raw.get("mu"))
        cfg["F"] = jump_from_json(raw.get("F"))
        cfg["u"] = potential_from_json(raw.get("u"))
        cfg["envelope"] = envelope_from_json(raw["envelope"]) if raw.get("envelope") else None
        mesh = raw.get("mesh") or {}
        _check_keys(mesh, {"h", "L"}, set(), "config.mesh")
        cfg["mesh"] = (float(mesh.get("h", 1.0 / 64)), float(mesh.get("L", 8.0)))
    return cfg
