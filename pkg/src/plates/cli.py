"""Command line entry point: ``plates {moduli,sweep,mesh,verify}``."""

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import experiments as ex
from . import fem, moduli
from .errors import ConfigError, PlatesError
from .fem import DisplacementState
from .mesh import disk_mesh, load_mesh, mesh_stats, save_mesh
from .solver import METRICS, OptimizerConfig

log = logging.getLogger("plates")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2

CSV_COLUMNS = [
    "theta", "iterations", "converged", "energy", "strain11", "strain22", "strain12",
    "strain_eig_ratio", "curl_l2", "grad_norm", "wall_time_s",
]

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mesh": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type"],
                    "properties": {
                        "type": {"const": "disk"},
                        "radius": {"type": "number", "exclusiveMinimum": 0},
                        "refinements": {"type": "integer", "minimum": 0, "maximum": 8},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["type", "path"],
                    "properties": {"type": {"const": "file"}, "path": {"type": "string"}},
                },
            ]
        },
        "material": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "layers": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["t_lo", "t_hi", "stiffness"],
                        "properties": {
                            "t_lo": {"type": "number"},
                            "t_hi": {"type": "number"},
                            "stiffness": {
                                "oneOf": [
                                    {
                                        "type": "object",
                                        "additionalProperties": False,
                                        "required": ["mu", "lambda"],
                                        "properties": {"mu": {"type": "number"}, "lambda": {"type": "number"}},
                                    },
                                    {
                                        "type": "object",
                                        "additionalProperties": False,
                                        "required": ["form3"],
                                        "properties": {
                                            "form3": {
                                                "type": "array", "items": {"type": "number"},
                                                "minItems": 6, "maxItems": 6,
                                            }
                                        },
                                    },
                                ]
                            },
                            "prestrain_const": _VEC3,
                            "prestrain_lin": _VEC3,
                        },
                    },
                }
            },
        },
        "thetas": {
            "oneOf": [
                {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["start", "stop", "count"],
                    "properties": {
                        "start": {"type": "number", "minimum": 0},
                        "stop": {"type": "number", "minimum": 0},
                        "count": {"type": "integer", "minimum": 1},
                        "spacing": {"enum": ["linear", "log"]},
                    },
                },
            ]
        },
        "mu_eps_exponent": {"type": "number"},
        "optimizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rho": {"type": "number"},
                "g_tol": {"type": "number"},
                "max_iters": {"type": "integer"},
                "max_backtracks": {"type": "integer"},
                "metric": {"enum": list(METRICS)},
                "cg_tol": {"type": "number"},
                "metric_refresh": {"type": "integer"},
            },
        },
        "init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": list(ex.INIT_KINDS)},
                "a": {"type": "number"},
                "b": {"type": "number"},
                "path": {"type": "string"},
                "perturbation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "seed": {"type": "integer", "minimum": 0},
                        "amplitude": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
        "warm_start": {"type": "boolean"},
        "workers": {"type": "integer", "minimum": 1},
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "mesh": {"type": "disk", "radius": 1.0, "refinements": 5},
    "material": {
        "layers": [
            {
                "t_lo": -0.5,
                "t_hi": 0.5,
                "stiffness": {"mu": 1.0, "lambda": 1.0},
                "prestrain_const": [0.0, 0.0, 0.0],
                "prestrain_lin": [1.0, 1.0, 0.0],
            }
        ]
    },
    "thetas": [1, 2, 5, 10, 20, 40, 60, 80, 100, 150],
    "mu_eps_exponent": -0.5,
    "optimizer": {
        "rho": 0.25,
        "g_tol": 1e-8,
        "max_iters": 20000,
        "max_backtracks": 40,
        "metric": "GaussNewton",
        "cg_tol": 1e-10,
        "metric_refresh": 100,
    },
    "init": {"kind": "flat", "a": 1.3, "b": 0.7, "perturbation": {"seed": 0, "amplitude": 1e-3}},
    "warm_start": True,
    "workers": 1,
    "output_dir": "plates-out",
}


def _error_path(err):
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def _fill(cfg, defaults):
    out = copy.deepcopy(cfg)
    for key, value in defaults.items():
        if key not in out:
            out[key] = copy.deepcopy(value)
        elif isinstance(value, dict) and isinstance(out[key], dict) and key not in ("mesh",):
            out[key] = _fill(out[key], value)
    return out


def resolve_config(raw):
    """Validate a config dict and fill every default; raises :class:`ConfigError`."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"config field {_error_path(err)}: {err.message}")
    cfg = _fill(raw, DEFAULTS)
    if cfg["mesh"]["type"] == "disk":
        cfg["mesh"] = _fill(cfg["mesh"], DEFAULTS["mesh"])
    for layer in cfg["material"]["layers"]:
        layer.setdefault("prestrain_const", [0.0, 0.0, 0.0])
        layer.setdefault("prestrain_lin", [0.0, 0.0, 0.0])
    if cfg["init"]["kind"] == "file" and "path" not in cfg["init"]:
        raise ConfigError("config field init/path: required when init/kind is 'file'")
    return cfg


def load_config(path):
    if path is None:
        return resolve_config({})
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config field <root>: must be a JSON object")
    return resolve_config(raw)


def _stiffness(spec):
    if "form3" in spec:
        a11, a12, a13, a22, a23, a33 = spec["form3"]
        return np.array([[a11, a12, a13], [a12, a22, a23], [a13, a23, a33]], dtype=float)
    return moduli.isotropic_reduced_stiffness(spec["mu"], spec["lambda"])


def build_stack(cfg):
    layers = [
        moduli.Layer(l["t_lo"], l["t_hi"], _stiffness(l["stiffness"]), l["prestrain_const"], l["prestrain_lin"])
        for l in cfg["material"]["layers"]
    ]
    return moduli.LayerStack(layers)


def build_mesh(cfg):
    m = cfg["mesh"]
    if m["type"] == "disk":
        return disk_mesh(m["radius"], m["refinements"])
    return load_mesh(m["path"])


def build_thetas(cfg):
    th = cfg["thetas"]
    if isinstance(th, list):
        return [float(t) for t in th]
    spacing = th.get("spacing", "linear")
    if spacing == "log":
        if th["start"] <= 0:
            raise ConfigError("config field thetas/start: must be positive for log spacing")
        return np.geomspace(th["start"], th["stop"], th["count"]).tolist()
    return np.linspace(th["start"], th["stop"], th["count"]).tolist()


def build_optimizer(cfg):
    return OptimizerConfig(**cfg["optimizer"])


def build_init(cfg):
    i = cfg["init"]
    p = i.get("perturbation", {})
    return ex.InitialCondition(
        kind=i["kind"], a=i["a"], b=i["b"], path=i.get("path"),
        seed=p.get("seed", 0), amplitude=p.get("amplitude", 0.0),
    )


def workers_from_env(requested):
    cap = os.environ.get("PLATES_THREADS")
    if cap is None:
        return requested
    try:
        cap = int(cap)
    except ValueError:
        raise ConfigError(f"PLATES_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(requested, cap))


# -- moduli -----------------------------------------------------------------

def moduli_report(stack):
    em = moduli.compute_moments(stack)
    Esym, K = moduli.lvk_minimizer(em)
    lki = moduli.lki_minimizer_set(em)
    out = em.as_dict()
    out["lvk_minimizer"] = {"sym_grad_u": Esym.tolist(), "hessian_v": K.tolist()}
    out["lki_minimizers"] = {
        "kind": lki.kind,
        "constant_profile": lki.constant,
        "value": lki.value,
        "count": len(lki.minimizers),
        "curvatures": [m.curvature.tolist() for m in lki.minimizers[:8]],
    }
    return out


def _format_report(rep):
    lines = []
    for key in ("M0", "M1", "M2", "Mstar"):
        lines.append(f"{key}:")
        lines += ["  " + " ".join(f"{v + 0.0: .6g}" for v in row) for row in rep[key]]
    for key in ("E0", "F0", "K0"):
        lines.append(f"{key}: " + " ".join(f"{v + 0.0:.6g}" for v in rep[key]))
    lines.append(f"gamma: {rep['gamma']:.6g}")
    lv = rep["lvk_minimizer"]
    lines.append("lvK minimiser: sym grad u = " + " ".join(f"{v + 0.0:.6g}" for v in lv["sym_grad_u"])
                 + ", Hess v = " + " ".join(f"{v + 0.0:.6g}" for v in lv["hessian_v"]))
    lk = rep["lki_minimizers"]
    lines.append(f"lKi minimisers: {lk['kind']} ({lk['count']} sampled), value {lk['value']:.6g}")
    return "\n".join(lines)


def cmd_moduli(args, cfg):
    rep = moduli_report(build_stack(cfg))
    print(_format_report(rep))
    text = json.dumps(rep, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# -- sweep ------------------------------------------------------------------

def _g(x):
    return f"{x:.12g}"


def record_row(rec):
    S = rec.mean_strain
    return [
        _g(rec.theta), str(rec.iterations), "1" if rec.converged else "0", _g(rec.energy),
        _g(S[0, 0]), _g(S[1, 1]), _g(S[0, 1]), _g(rec.symmetry_ratio), _g(rec.curl_l2),
        _g(rec.grad_norm), _g(rec.wall_time),
    ]


def write_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(record_row(rec))


def write_vtk(mesh, state: DisplacementState, path, title="plates state"):
    """Legacy ASCII unstructured grid; the height is the reconstructed potential of ``z``."""
    v, _ = fem.reconstruct_v(mesh, state.z)
    Gz = fem.element_gradients(mesh, state.z)
    curl_t = Gz[:, 1, 0] - Gz[:, 0, 1]
    # nodal curl: area-weighted average of the adjacent element values
    curl_n = np.bincount(mesh.tris.ravel(), weights=np.repeat(mesh.areas * curl_t, 3), minlength=mesh.n_nodes)
    curl_n /= np.bincount(mesh.tris.ravel(), weights=np.repeat(mesh.areas, 3), minlength=mesh.n_nodes)
    n, t = mesh.n_nodes, mesh.n_tris
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID", f"POINTS {n} double"]
    lines += [f"{x:.12g} {y:.12g} {h:.12g}" for (x, y), h in zip(mesh.nodes, v)]
    lines.append(f"CELLS {t} {4 * t}")
    lines += [f"3 {i} {j} {k}" for i, j, k in mesh.tris]
    lines.append(f"CELL_TYPES {t}")
    lines += ["5"] * t
    lines.append(f"POINT_DATA {n}")
    for name, field in (("u", state.u), ("z", state.z)):
        lines.append(f"VECTORS {name} double")
        lines += [f"{a:.12g} {b:.12g} 0" for a, b in field]
    lines += ["SCALARS curl double 1", "LOOKUP_TABLE default"]
    lines += [f"{c:.12g}" for c in curl_n]
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_sweep(args, cfg):
    out = Path(args.out or cfg["output_dir"])
    cfg = copy.deepcopy(cfg)
    cfg["output_dir"] = str(out)
    try:
        (out / "states").mkdir(parents=True, exist_ok=True)
        (out / "vtk").mkdir(exist_ok=True)
        (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ConfigError(f"cannot write to output directory {out}: {exc}") from None
    mesh = build_mesh(cfg)
    em = moduli.compute_moments(build_stack(cfg))
    mu_eps = mesh.eps ** cfg["mu_eps_exponent"]
    records = ex.theta_sweep(
        mesh, em, build_thetas(cfg), mu_eps, build_optimizer(cfg), build_init(cfg),
        warm_start=cfg["warm_start"], workers=workers_from_env(cfg["workers"]),
    )
    write_csv(records, out / "records.csv")
    for k, rec in enumerate(records):
        if rec.state is None:
            continue
        stem = f"theta_{k:03d}"
        ex.save_state(rec.state, out / "states" / f"{stem}.txt")
        write_vtk(mesh, rec.state, out / "vtk" / f"{stem}.vtk", title=f"theta={rec.theta:.12g}")
    for rec in records:
        print(f"theta={rec.theta:<10.6g} iters={rec.iterations:<6d} converged={rec.converged!s:<5} "
              f"ratio={rec.symmetry_ratio:.4f} energy={rec.energy:.10g}")
    tc = ex.detect_transition(records)
    print("transition: " + ("none detected" if tc is None else f"theta_c ~ {tc:.6g}"))
    return EXIT_SOLVER if any(r.failed for r in records) else EXIT_OK


# -- mesh -------------------------------------------------------------------

def cmd_mesh(args, cfg):
    mesh = build_mesh(cfg)
    if args.out:
        save_mesh(mesh, args.out)
    print(json.dumps(mesh_stats(mesh), indent=2))
    return EXIT_OK


# -- verify -----------------------------------------------------------------

def _fd_order(mesh, em, theta, mu_eps, rng, term_weights=(1.0, 1.0, 1.0)):
    """Worst empirical order of the central-difference defect over a few random states."""
    worst = np.inf
    for _ in range(3):
        w = rng.standard_normal((mesh.n_nodes, 4)) * 0.5
        d = rng.standard_normal((mesh.n_nodes, 4))
        g = fem.gradient(mesh, em, theta, DisplacementState.from_array(w), mu_eps, term_weights=term_weights)
        slope = np.sum(g * d)
        errs = []
        for h in (1e-3, 5e-4):
            Jp = fem.energy(mesh, em, theta, DisplacementState.from_array(w + h * d), mu_eps)
            Jm = fem.energy(mesh, em, theta, DisplacementState.from_array(w - h * d), mu_eps)
            errs.append(abs(Jp - Jm - 2 * h * slope))
        if errs[1] <= 1e-13 * max(1.0, abs(slope)):
            continue  # defect at rounding level
        worst = min(worst, np.log2(errs[0] / errs[1]))
    return worst


def verify_checks(cfg, inject_fault=False):
    """Run the consistency checks; returns a list of ``(name, passed, detail)``."""
    rng = np.random.default_rng(12345)
    stack = build_stack(cfg)
    em = moduli.compute_moments(stack)
    small = disk_mesh(1.0, 2)
    mu_eps = small.eps ** cfg["mu_eps_exponent"]
    results = []

    order = _fd_order(small, em, 1.0, mu_eps, rng, (1.01, 1.0, 1.0) if inject_fault else (1.0, 1.0, 1.0))
    results.append(("gradient finite differences", order >= 2.7, f"order {order:.3f} (need >= 2.7)"))

    worst = 0.0
    for _ in range(50):
        E, F = rng.standard_normal(3), rng.standard_normal(3)
        a = float(moduli.qbar2(em, E, F))
        b = moduli.qbar2_integral(stack, E, F)
        worst = max(worst, abs(a - b) / (1 + abs(b)))
    results.append(("completed-square identity", worst <= 1e-10, f"max rel error {worst:.2e}"))

    errs, hs = [], []
    for r in (2, 3, 4):
        m = disk_mesh(1.0, r)
        x = m.nodes
        st = DisplacementState(
            np.column_stack([0.3 * np.sin(2 * x[:, 0]) * x[:, 1], 0.2 * np.cos(x[:, 0] + x[:, 1])]),
            np.column_stack([np.sin(x[:, 0]) + 0.5 * x[:, 1] ** 2, np.cos(2 * x[:, 1]) * x[:, 0]]),
        )
        errs.append(fem.interpolation_defect(m, em, 1.0, st))
        hs.append(m.eps)
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    results.append(("interpolation defect decay", rate >= 0.9, f"order {rate:.3f} (need >= 0.9)"))

    # the optimal in-plane strain needs u = Esym x / sqrt(theta); the rest is O(sqrt(theta))
    x = small.nodes
    tiny = 1e-24
    Esym, K = moduli.lvk_minimizer(em)
    Ks, Es = moduli.vec_to_sym(K), moduli.vec_to_sym(Esym)
    st = DisplacementState(x @ Es.T / np.sqrt(tiny), x @ Ks.T)
    g = fem.gradient(small, em, tiny, st, 0.0)
    scale = 1.0 + np.abs(em.M2).max() * (1.0 + np.abs(K).max()) * small.area
    gn = np.abs(g).max() / scale
    results.append(("linearised optimum is stationary as theta -> 0", gn <= 1e-10, f"max |grad| {gn:.2e}"))

    st = DisplacementState(rng.standard_normal((small.n_nodes, 2)), rng.standard_normal((small.n_nodes, 2)))
    st2 = DisplacementState(rng.standard_normal((small.n_nodes, 2)), st.z)
    J1 = fem.energy(small, em, 0.0, st, mu_eps)
    J2 = fem.energy(small, em, 0.0, st2, mu_eps)
    gu = np.abs(fem.gradient(small, em, 0.0, st, mu_eps)[:, :2]).max()
    ok = abs(J1 - J2) <= 1e-12 * max(1.0, abs(J1)) and gu == 0.0
    results.append(("theta=0 decoupling of u", ok, f"|dJ| {abs(J1 - J2):.2e}, max |grad_u| {gu:.2e}"))
    return results


def cmd_verify(args, cfg):
    results = verify_checks(cfg, inject_fault=args.inject_fault)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_INVALID


# -- entry point ------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="plates", description="Pre-strained plate simulations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("moduli", help="effective moduli and analytic minimisers")
    s.add_argument("--config")
    s.add_argument("--out", help="write the JSON report here instead of stdout")
    s.set_defaults(func=cmd_moduli)

    s = sub.add_parser("sweep", help="minimise over a list of theta values")
    s.add_argument("--config")
    s.add_argument("--out", help="output directory (overrides output_dir)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("mesh", help="build a mesh and print its statistics")
    s.add_argument("--config")
    s.add_argument("--out", help="mesh file to write")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("verify", help="run the consistency checks")
    s.add_argument("--config")
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PlatesError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
