"""Configuration-driven experiment runner.

Subcommands: ``run`` (full experiment), ``serve`` (environment
process), ``train`` (agent process connecting over sockets),
``compare`` (before/after trace summary), and ``mesh gen`` (mesh file
generation). Configuration lives in TOML files with ``[mesh]``,
``[sim]``, ``[env]``, ``[agent]``, and ``[run]`` sections; command-line
flags override file values, and ``--preset`` selects the built-in
experiment configurations.

Exit codes: 0 on success, 1 on runtime failure (partial artifacts are
flagged in the manifest), 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, fem, mesh as meshmod, policy, proto
from .env import EnvConfig, EnvError, ReactionDiffusionEnv, read_trace_csv, write_trace_csv
from .fem import Field, SimParams
from .mesh import Mesh, build_unit_square, load_mesh, save_mesh

logger = logging.getLogger(__name__)

REGIONS15_CENTRAL = 7  # middle patch of the 5 x 3 tiling


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


def regions15_mesh_path() -> Path:
    """Packaged 15-region fixture mesh."""
    return Path(resources.files("rdcontrol").joinpath("data/regions15.mesh"))


def build_regions15_mesh() -> Mesh:
    """Synthetic 15-region tiling: a 5 x 3 patch grid on the unit square
    with a designated central region for the initial hot spot."""
    return build_unit_square(20, 12, 5, 3)


def default_config() -> dict:
    """Desk-scale square experiment: full constants, shortened episode count."""
    return {
        "mesh": {"kind": "square", "nx": 16, "ny": 16, "patch_nx": 8, "patch_ny": 8,
                 "path": ""},
        # dt keeps the episode diffusion-dominated; see README on horizons.
        "sim": {"beta": 2.5, "gamma": 1.0, "rho": 1.0, "dt": 0.005, "flux": 0.0},
        "env": {
            "objective": "diff",
            "w1": 1.0, "w2": 1.0, "w3": 1.0, "w4": 1.0,
            "action_low": 0.1, "action_high": 5.0, "kappa_scale": 1.0,
            "episode_len": 60,
            "ic_kind": "circle", "ic_center": [0.5, 0.5], "ic_radius": 0.3,
            "ic_value": 1.0, "ic_outside": 0.0, "ic_region": 0,
        },
        "agent": {
            "episodes": 200, "seed": 0,
            "hidden_size": 128, "learning_rate": 8e-5,
            "adam_iterations": 10, "line_search_iterations": 10,
            "spread_floor": 0.1,
        },
        "run": {"mode": "in-process", "out_dir": "runs/out", "addr": "",
                "port": proto.DEFAULT_PORT, "timeout": 300.0, "seeds": 1},
    }


def _square_preset() -> dict:
    config = default_config()
    config["agent"]["episodes"] = 1000
    config["run"]["out_dir"] = "runs/square"
    return config


def _regions_preset() -> dict:
    config = default_config()
    config["mesh"] = {"kind": "file", "path": "builtin:regions15",
                      "nx": 0, "ny": 0, "patch_nx": 0, "patch_ny": 0}
    config["sim"].update(beta=50.0, dt=0.01)
    config["env"].update(
        kappa_scale=1e4, episode_len=40,
        ic_kind="region", ic_region=REGIONS15_CENTRAL, ic_value=1.0,
    )
    config["agent"]["episodes"] = 1000
    config["run"]["out_dir"] = "runs/regions"
    return config


PRESETS = {"square": _square_preset, "regions": _regions_preset}


def merge_config(base: dict, override: dict, context: str = "") -> dict:
    """Merge section/key overrides into a config, rejecting unknown keys."""
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in out:
            raise ConfigError(f"unknown config section {context}[{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"section [{section}] must be a table")
        for key, value in values.items():
            if key not in out[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            out[section][key] = value
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad config file {path}: {exc}") from None


def resolve_config(preset: str | None, config_path, overrides: dict) -> dict:
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(
                f"unknown preset {preset!r}, available: {sorted(PRESETS)}")
        config = PRESETS[preset]()
    else:
        config = default_config()
    if config_path:
        config = merge_config(config, load_config_file(config_path))
    return merge_config(config, overrides)


def _ic_spec(env_section: dict) -> dict:
    kind = env_section["ic_kind"]
    if kind == "uniform":
        return {"kind": "uniform", "value": env_section["ic_value"]}
    if kind == "circle":
        return {"kind": "circle", "center": tuple(env_section["ic_center"]),
                "radius": env_section["ic_radius"],
                "inside": env_section["ic_value"],
                "outside": env_section["ic_outside"]}
    if kind == "region":
        return {"kind": "region", "region": env_section["ic_region"],
                "value": env_section["ic_value"],
                "outside": env_section["ic_outside"]}
    raise ConfigError(f"unknown ic_kind {kind!r}")


def build_mesh(config: dict) -> Mesh:
    section = config["mesh"]
    if section["kind"] == "square":
        return build_unit_square(section["nx"], section["ny"],
                                 section["patch_nx"], section["patch_ny"])
    if section["kind"] == "file":
        path = section["path"]
        if path == "builtin:regions15":
            path = regions15_mesh_path()
        if not Path(path).exists():
            raise ConfigError(f"mesh file not found: {path}")
        return load_mesh(path)
    raise ConfigError(f"unknown mesh kind {section['kind']!r}")


def build_environment(config: dict, mesh: Mesh | None = None) -> ReactionDiffusionEnv:
    mesh = mesh if mesh is not None else build_mesh(config)
    sim = config["sim"]
    envs = config["env"]
    seeds = derive_seeds(config["agent"]["seed"])
    params = SimParams(beta=sim["beta"], gamma=sim["gamma"], rho=sim["rho"],
                       dt=sim["dt"], n_steps=envs["episode_len"], flux=sim["flux"])
    env_config = EnvConfig(
        objective=envs["objective"],
        w1=envs["w1"], w2=envs["w2"], w3=envs["w3"], w4=envs["w4"],
        action_low=envs["action_low"], action_high=envs["action_high"],
        kappa_scale=envs["kappa_scale"], episode_len=envs["episode_len"],
        ic=_ic_spec(envs), seed=seeds["baseline"],
    )
    try:
        return ReactionDiffusionEnv(mesh, params, env_config)
    except (EnvError, fem.FemError) as exc:
        raise ConfigError(str(exc)) from exc


def derive_seeds(seed: int) -> dict:
    """Independent child seeds for the baseline episode, training, and
    the post-training evaluation episode."""
    children = np.random.SeedSequence(seed).spawn(3)
    names = ("baseline", "train", "eval")
    return {name: int(c.generate_state(1, np.uint64)[0]) for name, c in zip(names, children)}


def _write_manifest(out_dir: Path, config: dict, status: str, wall_time: float,
                    artifacts: list, error: str | None = None) -> None:
    manifest = {
        "config": config,
        "derived_seeds": derive_seeds(config["agent"]["seed"]),
        "status": status,
        "wall_time_s": wall_time,
        "artifacts": sorted(artifacts),
        "versions": {
            "rdcontrol": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
    }
    if error is not None:
        manifest["error"] = error
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_baseline_artifacts(out_dir: Path, env: ReactionDiffusionEnv) -> list:
    write_trace_csv(out_dir / "baseline.csv", [env.baseline_episode], env.n_actions)
    snaps = env.baseline_snapshots
    fem.write_field_csv(out_dir / "baseline_field_step0.csv", env.mesh, snaps["field_start"])
    fem.write_field_csv(out_dir / "baseline_field_final.csv", env.mesh, snaps["field_final"])
    fem.write_control_csv(out_dir / "baseline_kappa_step0.csv", snaps["control_start"])
    fem.write_control_csv(out_dir / "baseline_kappa_final.csv", snaps["control_final"])
    return ["baseline.csv", "baseline_field_step0.csv", "baseline_field_final.csv",
            "baseline_kappa_step0.csv", "baseline_kappa_final.csv"]


def _evaluate_policy(handle, env_for_scaling: ReactionDiffusionEnv, mesh: Mesh,
                     params: policy.PolicyParams, eval_seed: int,
                     out_dir: Path) -> list:
    """Run one deterministic mean-action episode, writing field and
    control snapshots at step 0 and the final step."""
    obs = handle.reset(eval_seed)
    control0 = env_for_scaling.scale_action(handle.last_action_rl)
    fem.write_field_csv(out_dir / "trained_field_step0.csv", mesh,
                        Field(obs.state_values, 0))
    fem.write_control_csv(out_dir / "trained_kappa_step0.csv", control0)
    done = False
    action = None
    while not done:
        action, _ = policy.forward(params, obs.state_values)
        obs, _, done = handle.step(action)
    fem.write_field_csv(out_dir / "trained_field_final.csv", mesh,
                        Field(obs.state_values, obs.step_index))
    fem.write_control_csv(out_dir / "trained_kappa_final.csv",
                          env_for_scaling.scale_action(action))
    return ["trained_field_step0.csv", "trained_field_final.csv",
            "trained_kappa_step0.csv", "trained_kappa_final.csv"]


def run_single(config: dict, out_dir: Path) -> None:
    """One experiment: baseline, training, evaluation, artifacts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    artifacts: list = []
    try:
        mesh = build_mesh(config)
        env = build_environment(config, mesh)
        seeds = derive_seeds(config["agent"]["seed"])
        mode = config["run"]["mode"]
        agent_cfg = config["agent"]

        env.record_baseline()
        artifacts += _write_baseline_artifacts(out_dir, env)

        episodes = agent_cfg["episodes"]
        if episodes > 0:
            if mode == "connect":
                handle = proto.connect(config["run"]["addr"] or None,
                                       config["run"]["port"] or None,
                                       timeout=config["run"]["timeout"])
            elif mode == "in-process":
                handle = env
            else:
                raise ConfigError(f"run mode {mode!r} cannot train; use serve/train")
            result = policy.train(
                handle, episodes, seed=seeds["train"],
                hidden_size=agent_cfg["hidden_size"],
                learning_rate=agent_cfg["learning_rate"],
                adam_iterations=agent_cfg["adam_iterations"],
                line_search_iterations=agent_cfg["line_search_iterations"],
                spread_floor=agent_cfg["spread_floor"],
            )
            write_trace_csv(out_dir / "trace.csv", result.traces, env.n_actions)
            policy.save_checkpoint(out_dir / "checkpoint.npz", result.params,
                                   result.adam_state, result.rng)
            artifacts += ["trace.csv", "checkpoint.npz"]
            artifacts += _evaluate_policy(handle, env, mesh, result.params,
                                          seeds["eval"], out_dir)
            if mode == "connect":
                handle.close()
    except ConfigError:
        raise
    except Exception as exc:
        _write_manifest(out_dir, config, "failed", time.monotonic() - start,
                        artifacts, error=str(exc))
        raise
    _write_manifest(out_dir, config, "ok", time.monotonic() - start, artifacts)


def compare_traces(before: list, after: list):
    """Per-step deltas between a reference trace and the mean over the
    final tenth of the episodes of another."""
    if not before or not after:
        raise ConfigError("compare needs non-empty traces on both sides")
    steps = len(before[0].rewards)
    for trace in before + after:
        if len(trace.rewards) != steps:
            raise ConfigError(
                f"trace step ranges differ: {len(trace.rewards) - 1} vs {steps - 1}")

    def final_decile_mean(traces, attr):
        n = max(1, len(traces) // 10)
        return np.mean([getattr(t, attr) for t in traces[-n:]], axis=0)

    rows = {"step": np.arange(steps)}
    for attr in ("reward", "norm_c", "norm_kappa"):
        field = attr if attr != "reward" else "rewards"
        b = final_decile_mean(before, field)
        a = final_decile_mean(after, field)
        rows[f"{attr}_before"] = b
        rows[f"{attr}_after"] = a
        rows[f"{attr}_delta"] = a - b
    return rows


def write_compare_outputs(rows: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    columns = list(rows)
    with open(out_dir / "compare.csv", "w") as f:
        f.write(",".join(columns) + "\n")
        for i in range(len(rows["step"])):
            cells = [str(int(rows["step"][i]))]
            cells += [repr(float(rows[c][i])) for c in columns[1:]]
            f.write(",".join(cells) + "\n")
    with open(out_dir / "compare.txt", "w") as f:
        f.write("per-step means over the final tenth of episodes\n")
        for attr in ("reward", "norm_c", "norm_kappa"):
            b = float(np.mean(rows[f"{attr}_before"]))
            a = float(np.mean(rows[f"{attr}_after"]))
            f.write(f"{attr:>12}: before {b: .6f}  after {a: .6f}  delta {a - b:+.6f}\n")


# -- subcommands ---------------------------------------------------------


def _override_args(args) -> dict:
    """Collect section overrides from command-line flags."""
    paths = {
        "episodes": ("agent", "episodes"),
        "seed": ("agent", "seed"),
        "hidden_size": ("agent", "hidden_size"),
        "learning_rate": ("agent", "learning_rate"),
        "objective": ("env", "objective"),
        "episode_len": ("env", "episode_len"),
        "kappa_scale": ("env", "kappa_scale"),
        "beta": ("sim", "beta"),
        "dt": ("sim", "dt"),
        "out": ("run", "out_dir"),
        "mode": ("run", "mode"),
        "addr": ("run", "addr"),
        "port": ("run", "port"),
        "timeout": ("run", "timeout"),
        "seeds": ("run", "seeds"),
        "mesh_file": ("mesh", "path"),
    }
    overrides: dict = {}
    for flag, (section, key) in paths.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.setdefault(section, {})[key] = value
    if getattr(args, "mesh_file", None):
        overrides.setdefault("mesh", {})["kind"] = "file"
    return overrides


def cmd_run(args) -> int:
    config = resolve_config(args.preset, args.config, _override_args(args))
    out_dir = Path(config["run"]["out_dir"])
    n_seeds = config["run"]["seeds"]
    if n_seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    if n_seeds == 1:
        run_single(config, out_dir)
        print(f"run complete: {out_dir}")
        return 0
    base_seed = config["agent"]["seed"]
    for i in range(n_seeds):
        sub = copy.deepcopy(config)
        sub["agent"]["seed"] = base_seed + i
        sub["run"]["out_dir"] = str(out_dir / f"seed_{base_seed + i}")
        run_single(sub, Path(sub["run"]["out_dir"]))
        print(f"seed {base_seed + i} complete")
    return 0


def cmd_serve(args) -> int:
    config = resolve_config(args.preset, args.config, _override_args(args))
    env = build_environment(config)
    env.record_baseline()
    out_dir = config["run"]["out_dir"]
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        artifacts = _write_baseline_artifacts(path, env)
        _write_manifest(path, config, "ok", 0.0, artifacts)
    server = proto.serve(env, config["run"]["addr"] or None,
                         config["run"]["port"], timeout=config["run"]["timeout"])
    print(f"serving environment on {server.host}:{server.port}")
    server.run()
    print("shutdown received, exiting")
    return 0


def _parse_endpoint(text: str):
    if ":" in text:
        host, port = text.rsplit(":", 1)
        try:
            return host, int(port)
        except ValueError:
            raise ConfigError(f"bad port in endpoint {text!r}") from None
    return text, None


def cmd_train(args) -> int:
    config = resolve_config(args.preset, args.config, _override_args(args))
    host, port = _parse_endpoint(args.connect) if args.connect else (None, None)
    out_dir = Path(config["run"]["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = derive_seeds(config["agent"]["seed"])
    agent_cfg = config["agent"]
    start = time.monotonic()
    artifacts: list = []
    try:
        handle = proto.connect(host, port, timeout=config["run"]["timeout"])
        result = policy.train(
            handle, agent_cfg["episodes"], seed=seeds["train"],
            hidden_size=agent_cfg["hidden_size"],
            learning_rate=agent_cfg["learning_rate"],
            adam_iterations=agent_cfg["adam_iterations"],
            line_search_iterations=agent_cfg["line_search_iterations"],
            spread_floor=agent_cfg["spread_floor"],
        )
        write_trace_csv(out_dir / "trace.csv", result.traces, handle.n_actions)
        policy.save_checkpoint(out_dir / "checkpoint.npz", result.params,
                               result.adam_state, result.rng)
        artifacts += ["trace.csv", "checkpoint.npz"]
        if args.shutdown_server:
            handle.shutdown()
        else:
            handle.close()
    except Exception as exc:
        _write_manifest(out_dir, config, "failed", time.monotonic() - start,
                        artifacts, error=str(exc))
        raise
    _write_manifest(out_dir, config, "ok", time.monotonic() - start, artifacts)
    print(f"training complete: {out_dir}")
    return 0


def cmd_compare(args) -> int:
    before = read_trace_csv(args.before)
    after = read_trace_csv(args.after)
    rows = compare_traces(before, after)
    write_compare_outputs(rows, Path(args.out))
    print(f"comparison written to {args.out}")
    return 0


def cmd_mesh(args) -> int:
    if args.mesh_command != "gen":
        raise ConfigError("unknown mesh subcommand")
    if args.kind == "square":
        mesh = build_unit_square(args.nx, args.ny, args.patch_nx, args.patch_ny)
    elif args.kind == "regions15":
        mesh = build_regions15_mesh()
    else:
        raise ConfigError(f"unknown mesh kind {args.kind!r}")
    save_mesh(mesh, args.out)
    print(f"wrote {mesh.n_nodes} nodes, {mesh.n_elements} elements, "
          f"{mesh.n_regions} regions to {args.out}")
    return 0


def _add_config_flags(parser, include_run_flags=True):
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None,
                        help="built-in experiment configuration")
    parser.add_argument("--config", default=None, help="TOML config file")
    parser.add_argument("--episodes", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--hidden-size", dest="hidden_size", type=int, default=None)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    parser.add_argument("--objective", choices=["diff", "state"], default=None)
    parser.add_argument("--episode-len", dest="episode_len", type=int, default=None)
    parser.add_argument("--kappa-scale", dest="kappa_scale", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--dt", type=float, default=None)
    parser.add_argument("--mesh-file", dest="mesh_file", default=None)
    parser.add_argument("--out", default=None, help="output directory")
    if include_run_flags:
        parser.add_argument("--addr", default=None)
        parser.add_argument("--port", type=int, default=None)
        parser.add_argument("--timeout", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdcontrol",
        description="Policy-gradient control of reaction-diffusion transport",
    )
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment")
    _add_config_flags(p_run)
    p_run.add_argument("--mode", choices=["in-process", "connect"], default=None)
    p_run.add_argument("--seeds", type=int, default=None,
                       help="number of independent seed runs")
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve", help="serve the environment over sockets")
    _add_config_flags(p_serve)
    p_serve.set_defaults(func=cmd_serve, mode=None, seeds=None)

    p_train = sub.add_parser("train", help="train against a remote environment")
    _add_config_flags(p_train)
    p_train.add_argument("--connect", default=None, metavar="ADDR[:PORT]",
                         help="environment endpoint (default from RDC_ADDR/RDC_PORT)")
    p_train.add_argument("--shutdown-server", action="store_true",
                         help="send shutdown to the environment when done")
    p_train.set_defaults(func=cmd_train, mode=None, seeds=None)

    p_cmp = sub.add_parser("compare", help="summarize before/after traces")
    p_cmp.add_argument("before")
    p_cmp.add_argument("after")
    p_cmp.add_argument("--out", default=".", help="output directory")
    p_cmp.set_defaults(func=cmd_compare)

    p_mesh = sub.add_parser("mesh", help="mesh utilities")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command", required=True)
    p_gen = mesh_sub.add_parser("gen", help="generate a mesh file")
    p_gen.add_argument("kind", choices=["square", "regions15"])
    p_gen.add_argument("--nx", type=int, default=16)
    p_gen.add_argument("--ny", type=int, default=16)
    p_gen.add_argument("--patch-nx", dest="patch_nx", type=int, default=8)
    p_gen.add_argument("--patch-ny", dest="patch_ny", type=int, default=8)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_mesh)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="=%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, meshmod.MeshFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: partial artifacts flagged
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
