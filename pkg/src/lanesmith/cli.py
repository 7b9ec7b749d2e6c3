"""Command-line entry point: corpus, training, sampling, simulation, metrics, rendering."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import multiprocessing as mp
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .behaviour.policy import PolicyConfig, RolloutConfig, ToyPolicy, TrainingDiverged as PolicyDiverged
from .corpus import CorpusConfig, generate_corpus, read_corpus, split_corpus, write_corpus
from .models.autoencoder import AeTrainConfig, TrainingDiverged, lane_embedding, load_autoencoder
from .models.diffusion import DmTrainConfig, SamplerConfig
from .scene import SceneError, SceneFormatError, load_scene, save_scene
from .scene.ops import partition_scene
from .scene.types import SceneRegion
from .sim import SimConfig
from .tensor.checkpoint import CheckpointError, atomic_write_bytes

log = logging.getLogger("lanesmith")

EXIT_OK = 0
EXIT_MISSING_ARTIFACT = 3
EXIT_BAD_SCENE = 4
EXIT_BAD_CONFIG = 5
EXIT_INVARIANT = 6

SECTIONS = {
    "corpus": CorpusConfig,
    "train_ae": AeTrainConfig,
    "train_dm": DmTrainConfig,
    "train_policy": PolicyConfig,
    "rollout": RolloutConfig,
    "generate": SamplerConfig,
    "sim": SimConfig,
}
GLOBAL_KEYS = {"seed", "out", "workers"}


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    pass


class BadScene(ValueError):
    pass


# ---- config ----------------------------------------------------------------------------------

def read_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    text = p.read_bytes()
    try:
        if p.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            return tomllib.loads(text.decode())
        data = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a table")
    return data


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def build_section(cls, table: dict, where: str):
    """Dataclass from a (possibly nested) table; unknown keys and type mismatches are rejected."""
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in table.items():
        if key not in names or key.startswith("_"):
            raise ConfigError(f"unknown key {where}.{key}")
        cur = getattr(obj, key)
        if dataclasses.is_dataclass(cur):
            value = build_section(type(cur), value, f"{where}.{key}")
        elif isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{key} must be a boolean")
        elif _is_number(cur) or (cur is None and _is_number(value)):
            if not _is_number(value):
                raise ConfigError(f"{where}.{key} must be a number")
            value = type(cur)(value) if isinstance(cur, float) else value
        elif isinstance(cur, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(cur):
                raise ConfigError(f"{where}.{key} must be a list of {len(cur)} values")
            value = tuple(value)
        elif cur is not None and not isinstance(value, type(cur)):
            raise ConfigError(f"{where}.{key} has the wrong type")
        setattr(obj, key, value)
    try:
        return dataclasses.replace(obj)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def resolve_config(raw: dict) -> dict:
    unknown = set(raw) - GLOBAL_KEYS - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {name: build_section(cls, raw.get(name, {}), name) for name, cls in SECTIONS.items()}
    for key in GLOBAL_KEYS:
        if key in raw:
            out[key] = raw[key]
    return out


def _seed_sections(cfg: dict, seed: int) -> None:
    for name in ("corpus", "train_ae", "train_dm", "train_policy"):
        cfg[name].seed = seed


def _jsonable(v):
    if dataclasses.is_dataclass(v):
        return {k: _jsonable(x) for k, x in dataclasses.asdict(v).items()}
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_json(path, data) -> None:
    atomic_write_bytes(path, (json.dumps(_jsonable(data), indent=1, sort_keys=True) + "\n").encode())


def _replace_dir(tmp: Path, final: Path) -> None:
    if final.exists():
        shutil.rmtree(final)
    os.replace(tmp, final)


# ---- artifact loading ---------------------------------------------------------------------------

def _need(path, what: str) -> Path:
    if path is None:
        raise MissingArtifact(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} artifact {p} not found")
    return p


def _load_ae(path):
    try:
        return load_autoencoder(_need(path, "ae"))
    except (CheckpointError, KeyError) as exc:
        raise MissingArtifact(f"unreadable autoencoder checkpoint {path}: {exc}") from exc


def _load_gen(ae_path, dm_path):
    from .models.diffusion import load_generator

    ae, stats = _load_ae(ae_path)
    try:
        return load_generator(_need(dm_path, "dm"), ae, stats)
    except (CheckpointError, KeyError) as exc:
        raise MissingArtifact(f"unreadable diffusion checkpoint {dm_path}: {exc}") from exc


def _load_scene(path):
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"scene {p} not found")
    try:
        return load_scene(p)
    except SceneFormatError as exc:
        raise BadScene(f"{p}: {exc}") from exc


def load_scenes(path, split: str | None = None) -> list:
    """A corpus directory (with manifest), a directory of scene files, or one scene file."""
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} not found")
    if p.is_file():
        return [_load_scene(p)]
    try:
        if (p / "manifest.json").exists():
            manifest = json.loads((p / "manifest.json").read_text())
            if "config" in manifest:
                return read_corpus(p, split)
        return [_load_scene(f) for f in sorted(p.glob("scene_*.json"))]
    except SceneFormatError as exc:
        raise BadScene(str(exc)) from exc


def write_scenes(out_dir: Path, scenes: list, meta: dict | None = None) -> None:
    tmp = out_dir.with_name(out_dir.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    files = []
    for i, s in enumerate(scenes):
        name = f"scene_{i:05d}.json"
        save_scene(tmp / name, s)
        files.append({"file": name, "n_objects": s.n_objects, "n_lanes": s.n_lanes})
    write_json(tmp / "manifest.json", {"scenes": files, **(meta or {})})
    _replace_dir(tmp, out_dir)


# ---- per-item parallelism ---------------------------------------------------------------------------

_CTX: dict = {}


def _pool_map(fn, n: int, workers: int) -> list:
    """fn(i) for i < n, in order; forked workers share the module-level context."""
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with mp.get_context("fork").Pool(min(workers, n)) as pool:
        return pool.map(fn, range(n))


FLAG_OVERRIDES = {
    "corpus": {"n_scenes": ("corpus", "n_scenes")},
    "train-ae": {"steps": ("train_ae", "steps")},
    "train-dm": {"steps": ("train_dm", "steps")},
    "train-policy": {"steps": ("train_policy", "steps")},
    "generate": {"guidance": ("generate", "guidance"), "label": ("generate", "label")},
    "inpaint": {},
    "simulate": {"kappa": ("sim", "kappa"), "route_length": ("sim", "route_length_target")},
}


def apply_overrides(args, cfg: dict) -> None:
    """Command-line flags win over the config file."""
    for flag, (section, key) in FLAG_OVERRIDES.get(args.command, {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            try:
                cfg[section] = dataclasses.replace(cfg[section], **{key: value})
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"--{flag.replace('_', '-')}: {exc}") from exc


# ---- commands -----------------------------------------------------------------------------------

def cmd_corpus(args, cfg) -> int:
    c = cfg["corpus"]
    scenes = generate_corpus(c)
    final = args.out / "corpus"
    tmp = args.out / "corpus.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    write_corpus(tmp, scenes, c)
    _replace_dir(tmp, final)
    train, test = split_corpus(scenes, c.seed)
    print(f"wrote {len(scenes)} scenes ({len(train)} train, {len(test)} test) to {final}")
    return EXIT_OK


def cmd_train_ae(args, cfg) -> int:
    from .models.autoencoder import save_autoencoder, train_autoencoder

    c = cfg["train_ae"]
    train = load_scenes(args.corpus, "train")
    val = load_scenes(args.corpus, "test")[:50]
    model, stats, hist = train_autoencoder(train, c, val=val or None, log_path=args.out / "train_ae.csv")
    save_autoencoder(args.out / "ae.ckpt", model, stats)
    last = hist[-1] if hist else {}
    write_json(args.out / "train_ae.json", {"final": last, "val": [[s, v] for s, v in model.val_history]})
    print(f"autoencoder saved to {args.out / 'ae.ckpt'}; final loss {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def cmd_train_dm(args, cfg) -> int:
    from .models.diffusion import save_generator, train_diffusion

    c = cfg["train_dm"]
    ae, stats = _load_ae(args.ae)
    train = load_scenes(args.corpus, "train")
    gen, hist = train_diffusion(train, ae, stats, c, log_path=args.out / "train_dm.csv")
    save_generator(args.out / "dm.ckpt", gen)
    last = hist[-1] if hist else {}
    write_json(args.out / "train_dm.json", {"final": last})
    print(f"diffusion model saved to {args.out / 'dm.ckpt'}; final loss {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def _policy_rollout(i):
    from .behaviour.policy import idm_rollout

    return idm_rollout(_CTX["scenes"][i], np.random.default_rng([_CTX["seed"], i]), _CTX["rollout"])


def cmd_train_policy(args, cfg) -> int:
    from .behaviour.policy import action_accuracy, train_toy_policy

    c = cfg["train_policy"]
    scenes = load_scenes(args.corpus, "train")
    if args.n_scenes is not None:
        scenes = scenes[:args.n_scenes]
    _CTX.update(scenes=scenes, seed=c.seed, rollout=cfg["rollout"])
    rollouts = _pool_map(_policy_rollout, len(scenes), args.workers)
    policy, hist = train_toy_policy(rollouts, c)
    policy.save(args.out / "policy.ckpt")
    acc = action_accuracy(policy, rollouts[:20])
    write_json(args.out / "train_policy.json", {"final": hist[-1] if hist else {}, "action_accuracy": acc})
    print(f"policy saved to {args.out / 'policy.ckpt'}; action accuracy {acc:.3f}")
    return EXIT_OK


def cmd_generate(args, cfg) -> int:
    from .models.diffusion import sample_objects_given_lanes, sample_scene

    gen = _load_gen(args.ae, args.dm)
    s = cfg["generate"]
    rng = np.random.default_rng(args.seed)
    if args.map is not None:
        base = _load_scene(args.map)
        scenes = [sample_objects_given_lanes(gen, base, rng, s, args.agents) for _ in range(args.n)]
    elif (args.agents is None) != (args.lanes is None):
        raise ConfigError("--agents and --lanes go together")
    elif args.agents is not None:
        scenes = sample_scene(gen, [(args.agents, args.lanes)] * args.n, rng, s)
    else:
        scenes = sample_scene(gen, "empirical", rng, s, n=args.n)
    write_scenes(args.out / "generated", scenes)
    print(f"wrote {len(scenes)} scenes to {args.out / 'generated'}")
    return EXIT_OK


def behind_region(scene):
    """The part of an ego-centred scene at x <= 0, as inpainting input."""
    part = partition_scene(scene)
    keep_l = np.flatnonzero(part.lane_regions() == SceneRegion.F_N)
    keep_o = np.flatnonzero(part.object_regions() == SceneRegion.F_N)
    out = part.subset(keep_l, keep_o)
    out.partitioned = False
    out.meta = {}
    return out


def cmd_inpaint(args, cfg) -> int:
    from .models.diffusion import inpaint

    gen = _load_gen(args.ae, args.dm)
    scene = _load_scene(args.scene)
    out = inpaint(gen, behind_region(scene), np.random.default_rng(args.seed), cfg["generate"])
    path = args.out / "inpainted.json"
    save_scene(path, out)
    print(f"inpainted scene ({out.n_lanes} lanes, {out.n_objects} objects) written to {path}")
    return EXIT_OK


def _episode(i):
    from .sim import IdmAgents, run_episode, world_from_scene

    scenes, sim_cfg, seed = _CTX["scenes"], _CTX["sim"], _CTX["seed"]
    world = world_from_scene(scenes[i % len(scenes)], np.random.default_rng([seed, i]), sim_cfg,
                             _CTX["distracted"])
    policy = _CTX["policy"] or IdmAgents()
    ep = run_episode(world, policy, sim_cfg, np.random.default_rng([seed, i, 1]), gen=_CTX["gen"])
    return ep.outcome.value, ep.extensions, ep.log_bytes()


def cmd_simulate(args, cfg) -> int:
    from .sim import Episode, Outcome, episode_metrics

    sim_cfg = cfg["sim"]
    scenes = load_scenes(args.scenes, "test") or load_scenes(args.scenes)
    if not scenes:
        raise MissingArtifact(f"no scenes under {args.scenes}")
    policy = None
    if args.policy is not None:
        try:
            policy = ToyPolicy.load(_need(args.policy, "policy"))
        except (CheckpointError, KeyError) as exc:
            raise MissingArtifact(f"unreadable policy checkpoint {args.policy}: {exc}") from exc
    gen = _load_gen(args.ae, args.dm) if args.dm is not None else None
    _CTX.update(scenes=scenes, sim=sim_cfg, seed=args.seed, policy=policy, gen=gen, distracted=0.0)
    results = _pool_map(_episode, args.episodes, args.workers)
    tmp = args.out / "episodes.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    for i, (_, _, blob) in enumerate(results):
        (tmp / f"episode_{i:04d}.jsonl").write_bytes(blob)
    _replace_dir(tmp, args.out / "episodes")
    eps = [Episode(Outcome(o), 0, np.zeros((0, 3)), [], 0.0, n_ext) for o, n_ext, _ in results]
    m = episode_metrics(eps)
    m["extensions"] = int(sum(e.extensions for e in eps))
    write_json(args.out / "sim_metrics.json", m)
    print(f"{'collision %':<14}{'offroad %':<14}{'success %':<14}{'timeout %':<14}episodes")
    print(f"{m['collision']:<14.1f}{m['offroad']:<14.1f}{m['success']:<14.1f}{m['timeout']:<14.1f}{m['episodes']}")
    return EXIT_OK


def cmd_metrics(args, cfg) -> int:
    from .metrics.report import format_table, scene_metrics_report

    real = load_scenes(args.real, args.split)
    gen = load_scenes(args.gen, args.split if Path(args.gen) == Path(args.real) else None)
    if not real or not gen:
        raise MissingArtifact("both scene sets must be non-empty")
    embed = None
    if args.ae is not None:
        ae, stats = _load_ae(args.ae)
        embed = lambda s: lane_embedding(ae, s, stats)  # noqa: E731
    report = scene_metrics_report(real, gen, embed)
    write_json(args.out / "metrics.json", report)
    print(format_table(report))
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    from .sim import render_svg

    scene = _load_scene(args.scene)
    svg = render_svg(scene.lanes, scene.objects, scene.object_classes, half_extent=args.extent)
    path = args.out / (Path(args.scene).stem + ".svg")
    atomic_write_bytes(path, svg.encode())
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "corpus": cmd_corpus, "train-ae": cmd_train_ae, "train-dm": cmd_train_dm, "train-policy": cmd_train_policy,
    "generate": cmd_generate, "inpaint": cmd_inpaint, "simulate": cmd_simulate, "metrics": cmd_metrics,
    "render": cmd_render,
}


# ---- parser -----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON or TOML file with per-command tables")
    common.add_argument("--seed", type=int, help="global seed (default 0)")
    common.add_argument("--out", type=Path, help="output directory (default ./out)")
    common.add_argument("--workers", type=int, help="worker processes for per-scene work (default: all cores)")
    p = argparse.ArgumentParser(prog="lanesmith", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", parents=[common], help="generate the synthetic scene corpus")
    c.add_argument("--n-scenes", type=int)

    for name, what in (("train-ae", "autoencoder"), ("train-dm", "latent diffusion model"),
                       ("train-policy", "return-conditioned behaviour policy")):
        t = sub.add_parser(name, parents=[common], help=f"train the {what}")
        t.add_argument("--corpus", type=Path, required=True)
        t.add_argument("--steps", type=int)
        if name == "train-dm":
            t.add_argument("--ae", type=Path, required=True)
        if name == "train-policy":
            t.add_argument("--n-scenes", type=int, help="use only the first N training scenes")

    g = sub.add_parser("generate", parents=[common], help="sample scenes from noise")
    g.add_argument("--ae", type=Path, required=True)
    g.add_argument("--dm", type=Path, required=True)
    g.add_argument("--n", type=int, default=1)
    g.add_argument("--agents", type=int, help="number of agents (with --lanes)")
    g.add_argument("--lanes", type=int, help="number of lanes (with --agents)")
    g.add_argument("--map", type=Path, help="scene whose lanes are kept; only agents are generated")
    g.add_argument("--guidance", type=float)
    g.add_argument("--label", type=int, choices=[0, 1])

    i = sub.add_parser("inpaint", parents=[common], help="generate the region ahead of the ego")
    i.add_argument("--ae", type=Path, required=True)
    i.add_argument("--dm", type=Path, required=True)
    i.add_argument("--scene", type=Path, required=True)

    s = sub.add_parser("simulate", parents=[common], help="closed-loop episodes with the planner")
    s.add_argument("--scenes", type=Path, required=True, help="corpus directory or scene file")
    s.add_argument("--episodes", type=int, default=10)
    s.add_argument("--policy", type=Path, help="learned agent policy (default: rule-based agents)")
    s.add_argument("--ae", type=Path)
    s.add_argument("--dm", type=Path, help="enables map extension by inpainting")
    s.add_argument("--kappa", type=float)
    s.add_argument("--route-length", type=float)

    m = sub.add_parser("metrics", parents=[common], help="realism metrics between two scene sets")
    m.add_argument("--real", type=Path, required=True)
    m.add_argument("--gen", type=Path, required=True)
    m.add_argument("--split", choices=["train", "test"])
    m.add_argument("--ae", type=Path, help="probe autoencoder for the perceptual distance")

    r = sub.add_parser("render", parents=[common], help="draw a scene as SVG")
    r.add_argument("--scene", type=Path, required=True)
    r.add_argument("--extent", type=float, default=40.0, help="half-width of the drawing in metres")
    return p


def _setup_logging() -> None:
    level = os.environ.get("LANESMITH_LOG", "WARNING").upper()
    logging.basicConfig(level=int(level) if level.isdigit() else getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        raw = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(raw)
        args.seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        args.out = Path(args.out if args.out is not None else cfg.get("out", "out"))
        args.workers = args.workers if args.workers is not None else int(cfg.get("workers", os.cpu_count() or 1))
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        _seed_sections(cfg, args.seed)
        apply_overrides(args, cfg)
        args.out.mkdir(parents=True, exist_ok=True)
        snapshot = {"command": args.command, **{k: v for k, v in vars(args).items() if k not in ("command", "config")}}
        snapshot.update({k: v for k, v in cfg.items() if k in SECTIONS})
        write_json(args.out / f"config.{args.command}.json", snapshot)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING_ARTIFACT
    except BadScene as exc:
        print(f"malformed scene: {exc}", file=sys.stderr)
        return EXIT_BAD_SCENE
    except (SceneError, TrainingDiverged, PolicyDiverged, ValueError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
