import json

import pytest

from lanesmith.cli import (
    EXIT_BAD_CONFIG,
    EXIT_BAD_SCENE,
    EXIT_INVARIANT,
    EXIT_MISSING_ARTIFACT,
    build_parser,
    load_scenes,
    main,
)

TINY = """
seed = 3

[corpus]
n_scenes = 30

[train_ae]
steps = 3
batch_size = 4
eval_every = 100

[train_ae.model]
lane_latent = 4
object_latent = 3
d_lane = 16
d_object = 8
d_edge = 4
heads_lane = 2
heads_object = 2
n_encoder = 1
n_decoder = 1

[train_dm]
steps = 3
batch_size = 4
T = 10

[train_dm.model]
d_lane = 16
d_object = 8
heads_lane = 2
heads_object = 2
n_blocks = 1

[train_policy]
steps = 20
hidden = 16
batch_size = 32

[rollout]
steps = 30

[generate]
guidance = 1.0

[sim]
route_length_target = 20.0
"""


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    out = root / "out"
    common = ("--config", cfg, "--out", out, "--workers", 1)
    assert run("corpus", *common) == 0
    assert run("train-ae", *common, "--corpus", out / "corpus") == 0
    assert run("train-dm", *common, "--corpus", out / "corpus", "--ae", out / "ae.ckpt") == 0
    assert run("train-policy", *common, "--corpus", out / "corpus", "--n-scenes", 3) == 0
    return root, cfg, out, common


def test_pipeline_writes_artifacts_and_snapshots(pipeline):
    _, _, out, _ = pipeline
    for name in ("ae.ckpt", "dm.ckpt", "policy.ckpt", "corpus/manifest.json"):
        assert (out / name).exists()
    snap = json.loads((out / "config.train-dm.json").read_text())
    assert snap["train_dm"]["steps"] == 3 and snap["seed"] == 3
    assert snap["train_dm"]["model"]["d_lane"] == 16
    assert len(load_scenes(out / "corpus")) == 30


def test_corpus_is_byte_reproducible(pipeline, tmp_path):
    _, cfg, out, _ = pipeline
    assert run("corpus", "--config", cfg, "--out", tmp_path) == 0
    for f in sorted((out / "corpus").iterdir()):
        assert (tmp_path / "corpus" / f.name).read_bytes() == f.read_bytes()


def test_generate_exact_counts_and_reproducible(pipeline, tmp_path):
    _, cfg, out, _ = pipeline
    blobs = []
    for d in ("a", "b"):
        assert run("generate", "--config", cfg, "--out", tmp_path / d, "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt",
                   "--n", 3, "--agents", 8, "--lanes", 24) == 0
        scenes = load_scenes(tmp_path / d / "generated")
        assert [(s.n_objects, s.n_lanes) for s in scenes] == [(8, 24)] * 3
        blobs.append([f.read_bytes() for f in sorted((tmp_path / d / "generated").iterdir())])
    assert blobs[0] == blobs[1]


def test_generate_empirical_and_map_conditioned(pipeline, tmp_path):
    _, cfg, out, _ = pipeline
    assert run("generate", "--config", cfg, "--out", tmp_path, "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt",
               "--n", 2) == 0
    assert len(load_scenes(tmp_path / "generated")) == 2
    scene = sorted((out / "corpus").glob("scene_*.json"))[0]
    assert run("generate", "--config", cfg, "--out", tmp_path, "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt",
               "--map", scene, "--agents", 2) == 0
    got = load_scenes(tmp_path / "generated")[0]
    assert got.n_objects == 2 and got.n_lanes == load_scenes(scene)[0].n_lanes


def test_inpaint_render_metrics(pipeline, tmp_path):
    _, cfg, out, common = pipeline
    scene = sorted((out / "corpus").glob("scene_*.json"))[1]
    assert run("inpaint", "--config", cfg, "--out", tmp_path, "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt",
               "--scene", scene) == 0
    assert (tmp_path / "inpainted.json").exists()
    assert run("render", "--out", tmp_path, "--scene", tmp_path / "inpainted.json") == 0
    assert (tmp_path / "inpainted.svg").read_text().startswith("<svg")
    assert run("metrics", "--out", tmp_path, "--real", out / "corpus", "--gen", out / "corpus") == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    assert abs(report["connectivity_jsd"]["raw"]) < 1e-12
    assert all(abs(v["raw"]) < 1e-9 for k, v in report.items() if k.endswith("_jsd") and v["raw"] is not None)


def test_simulate_with_policy_and_extension(pipeline, tmp_path):
    _, cfg, out, _ = pipeline
    args = ("simulate", "--config", cfg, "--scenes", out / "corpus", "--episodes", 2,
            "--policy", out / "policy.ckpt", "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt", "--kappa", 1.0)
    assert run(*args, "--out", tmp_path / "a", "--workers", 1) == 0
    assert run(*args, "--out", tmp_path / "b", "--workers", 2) == 0
    m = json.loads((tmp_path / "a" / "sim_metrics.json").read_text())
    assert m["episodes"] == 2
    assert abs(m["collision"] + m["offroad"] + m["success"] + m["timeout"] - 100.0) < 1e-9
    for f in sorted((tmp_path / "a" / "episodes").iterdir()):
        assert (tmp_path / "b" / "episodes" / f.name).read_bytes() == f.read_bytes()
    snap = json.loads((tmp_path / "a" / "config.simulate.json").read_text())
    assert snap["sim"]["kappa"] == 1.0 and snap["sim"]["route_length_target"] == 20.0


# ---- exit codes ---------------------------------------------------------------------------------

def test_missing_checkpoint(tmp_path):
    assert run("generate", "--out", tmp_path, "--ae", tmp_path / "nope.ckpt", "--dm", tmp_path / "dm.ckpt") \
        == EXIT_MISSING_ARTIFACT
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert run("generate", "--out", tmp_path, "--ae", tmp_path / "junk.ckpt", "--dm", tmp_path / "dm.ckpt") \
        == EXIT_MISSING_ARTIFACT


def test_malformed_scene(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("render", "--out", tmp_path, "--scene", bad) == EXIT_BAD_SCENE
    bad.write_text(json.dumps({"lanes": [[[0, 0]]]}))
    assert run("render", "--out", tmp_path, "--scene", bad) == EXIT_BAD_SCENE


@pytest.mark.parametrize("text", [
    '{"corpus": {"n_scene": 3}}',
    '{"nonsense": {}}',
    '{"corpus": {"n_scenes": "many"}}',
    '{"corpus": {"intersection_prob": 2.0}}',
    '{"train_dm": {"model": {"depth": 3}}}',
    '[1, 2]',
    '{broken',
])
def test_config_schema_violations(tmp_path, text):
    cfg = tmp_path / "c.json"
    cfg.write_text(text)
    assert run("corpus", "--config", cfg, "--out", tmp_path) == EXIT_BAD_CONFIG


def test_bad_flag_values(tmp_path):
    assert run("corpus", "--out", tmp_path, "--workers", 0) == EXIT_BAD_CONFIG
    assert run("corpus", "--out", tmp_path, "--n-scenes", -1) == EXIT_BAD_CONFIG


def test_invariant_violation_exit_code(pipeline, tmp_path):
    _, cfg, out, _ = pipeline
    assert run("generate", "--config", cfg, "--out", tmp_path, "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt",
               "--agents", 8) == EXIT_BAD_CONFIG
    assert run("generate", "--config", cfg, "--out", tmp_path, "--ae", out / "ae.ckpt", "--dm", out / "dm.ckpt",
               "--agents", 500, "--lanes", 3) == EXIT_INVARIANT


def test_help_lists_all_commands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    text = capsys.readouterr().out
    for name in ("corpus", "train-ae", "train-dm", "generate", "inpaint", "simulate", "metrics", "render"):
        assert name in text
