import filecmp
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from splatparse import io, pipeline, sceneparse, seglift
from splatparse import flow as F
from splatparse.cli import main
from splatparse.gaussians import GaussianScene
from splatparse.sceneparse import ParsedObject
from splatparse.synth import preset_layout, synth_scene

FAST = {
    "config.segment.steps": 2000,
    "config.occlude.image_size": [48, 48],
    "config.amodal-data.frame_size": [32, 32],
    "config.regen.train_steps": 150,
    "config.regen.hidden": 32,
    "config.regen.library_size": 16,
}


def _manifest(out, **extra):
    m = {"synth": {"preset": "three_objects"}, "out": str(out), "seed": 7}
    over = dict(FAST)
    over.update(extra)
    return pipeline.load_manifest(m, overrides=over, environ={})


def _files(root: Path) -> list[str]:
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("run_a")
    reports = pipeline.run_pipeline(_manifest(out))
    return out, reports


def test_full_pipeline_bundle(bundle):
    out, reports = bundle
    assert [o["id"] for o in reports["parse"]["objects"]] == [0, 1, 2]
    for k in range(3):
        assert (out / f"parse/obj_{k:02d}.ply").is_file()
        assert (out / f"parse/obj_{k:02d}.json").is_file()
        assert (out / f"regen/obj_{k:02d}.ply").is_file()
    assert reports["compose"]["compose_check"]
    truth = synth_scene(preset_layout("three_objects"), pipeline.stage_rng(7, "synth"))
    seg = io.read_ply(out / "segment/scene.ply")
    assert seglift.label_accuracy(seg.instance_ids, truth.instance_ids) >= 0.99
    assert np.any(seg.features != 0)


def test_compose_from_extracted_objects_is_exact(bundle):
    out, _ = bundle
    parsed = io.read_ply(out / "parse/scene.ply")
    fg = parsed.instance_ids >= 0
    objs = sceneparse.extract_objects(parsed)
    composed = pipeline.compose(objs, parsed.subset(np.flatnonzero(~fg)))
    for lab in parsed.labels():
        a = np.sort(parsed.positions[parsed.instance_ids == lab], axis=0)
        b = np.sort(composed.positions[composed.instance_ids == lab], axis=0)
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


def test_recomposed_bundle_matches_parsed(bundle):
    out, _ = bundle
    objs, bg = pipeline.load_bundle(out)
    parsed = io.read_ply(out / "parse/scene.ply")
    composed = pipeline.compose(objs, bg)
    # object files hold float32 local coordinates, so allow one rounding each way
    tol = 4 * np.finfo(np.float32).eps * np.abs(parsed.positions).max()
    for lab in parsed.labels():
        a = np.sort(parsed.positions[parsed.instance_ids == lab], axis=0)
        b = np.sort(composed.positions[composed.instance_ids == lab], axis=0)
        np.testing.assert_allclose(a, b, atol=tol, rtol=0)


def test_rerun_is_byte_identical(bundle, tmp_path):
    out, _ = bundle
    pipeline.run_pipeline(_manifest(tmp_path))
    assert _files(out) == _files(tmp_path)
    _, mismatch, errors = filecmp.cmpfiles(out, tmp_path, _files(out), shallow=False)
    assert mismatch == [] and errors == []


def test_provenance_lists_every_output(bundle):
    out, _ = bundle
    prov = io.read_json(out / "provenance.json")
    assert sorted(prov["stages"]) == sorted(pipeline.STAGES)
    listed = {}
    for stage in prov["stages"].values():
        for e in stage["outputs"]:
            listed[e["path"]] = e["sha256"]
    expected = set(_files(out)) - {"provenance.json", "manifest.json"}
    assert set(listed) == expected
    for path, digest in listed.items():
        assert pipeline.sha256_file(out / path) == digest
    # every stage input is an earlier stage's output with the same hash
    seen = {}
    for stage in pipeline.STAGES:
        for e in prov["stages"][stage]["inputs"]:
            assert seen.get(e["path"]) == e["sha256"], (stage, e["path"])
        seen.update({e["path"]: e["sha256"] for e in prov["stages"][stage]["outputs"]})


def test_downstream_stages_rerun_alone(bundle, tmp_path):
    out, _ = bundle
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    before = {p: (work / p).read_bytes() for p in _files(work) if p.startswith(("regen/", "compose/"))}
    shutil.rmtree(work / "regen")
    shutil.rmtree(work / "compose")
    pipeline.run_pipeline(_manifest(work, stages=["regen", "compose"]))
    after = {p: (work / p).read_bytes() for p in _files(work) if p.startswith(("regen/", "compose/"))}
    assert before == after


def test_segment_only(tmp_path):
    pipeline.run_pipeline(_manifest(tmp_path, stages=["segment"], **{"config.segment.steps": 50}))
    scene = io.read_ply(tmp_path / "segment/scene.ply")
    assert np.all(np.linalg.norm(scene.features, axis=1) > 0)
    assert not (tmp_path / "parse").exists()
    assert not (tmp_path / "compose").exists()


def test_compose_drop_and_swap(bundle):
    out, _ = bundle
    objs, bg = pipeline.load_bundle(out)
    full = pipeline.compose(objs, bg)
    without = pipeline.compose([o for o in objs if o.instance_id != 1], bg)
    assert set(without.labels()) == {0, 2}
    assert len(without) == len(full) - int(np.sum(full.instance_ids == 1))
    regen = io.read_ply(out / "regen/obj_01.ply")
    swapped = pipeline.compose([ParsedObject(1, regen, o.config) if o.instance_id == 1 else o for o in objs], bg)
    for lab in (0, 2):
        a, b = full.select_label(lab), swapped.select_label(lab)
        assert np.array_equal(a.positions, b.positions) and np.array_equal(a.scales, b.scales)
        assert np.array_equal(a.rotations, b.rotations) and np.array_equal(a.colors, b.colors)


def test_compose_missing_object(bundle, tmp_path):
    out, _ = bundle
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    (work / "regen/obj_02.ply").unlink()
    with pytest.raises(FileNotFoundError):
        pipeline.load_bundle(work, "regenerated")
    with pytest.raises(pipeline.StageError) as err:
        pipeline.run_pipeline(_manifest(work, stages=["compose"], **{"config.compose.geometry": "regenerated"}))
    assert err.value.stage == "compose"


def test_regen_uses_checkpoint(bundle, tmp_path):
    out, _ = bundle
    work = tmp_path / "copy"
    shutil.copytree(out, work)
    shutil.rmtree(work / "regen")
    model = F.FlowModel.init((4, 4, 4, 4), F.FlowConfig(hidden=8))
    model.save(tmp_path / "ck.f32")
    pipeline.run_pipeline(_manifest(work, stages=["regen"], **{"config.regen.checkpoint": str(tmp_path / "ck.f32")}))
    assert not (work / "regen/flow.f32").exists()
    prov = io.read_json(work / "provenance.json")
    assert any(e["path"].endswith("ck.f32") for e in prov["stages"]["regen"]["inputs"])


@pytest.mark.parametrize("change, message", [
    ({"stages": ["parse", "segment"]}, "order"),
    ({"stages": ["segment", "bogus"]}, "unknown stages"),
    ({"stages": []}, "non-empty"),
    ({"seed": -1}, "seed"),
    ({"config.regen.t": 1.5}, "t must"),
    ({"config.parse.background": "floor"}, "background"),
])
def test_manifest_validation(tmp_path, change, message):
    with pytest.raises(pipeline.ManifestError, match=message):
        _manifest(tmp_path, **change)


def test_missing_upstream_outputs(tmp_path):
    with pytest.raises(pipeline.ManifestError, match="needs outputs of 'parse'"):
        _manifest(tmp_path, stages=["occlude"])


def test_schema_and_unknown_keys(tmp_path):
    with pytest.raises(pipeline.ManifestError, match="schema"):
        pipeline.load_manifest({"schema": "splatparse.manifest/0", "synth": {}}, environ={})
    with pytest.raises(pipeline.ManifestError, match="unknown manifest key"):
        pipeline.load_manifest({"synth": {}, "config": {"regen": {"temperature": 1}}}, environ={})


def test_env_overrides(tmp_path):
    env = {"SPLATPARSE_SEED": "3", "SPLATPARSE_CONFIG__REGEN__T": "0.25",
           "SPLATPARSE_CONFIG__AMODAL_DATA__FRAMES": "4", "SPLATPARSE_BACKEND": "numpy", "HOME": "/x"}
    m = pipeline.load_manifest({"synth": {"preset": "two_blobs"}, "out": str(tmp_path)}, environ=env)
    assert m["seed"] == 3 and m["config"]["regen"]["t"] == 0.25 and m["config"]["amodal-data"]["frames"] == 4
    with pytest.raises(pipeline.ManifestError):
        pipeline.load_manifest({"synth": {}}, environ={"SPLATPARSE_NOPE": "1"})


def test_stage_streams():
    a = pipeline.stage_rng(0, "occlude", 1).integers(1 << 30, size=4)
    assert np.array_equal(a, pipeline.stage_rng(0, "occlude", 1).integers(1 << 30, size=4))
    assert not np.array_equal(a, pipeline.stage_rng(0, "occlude", 2).integers(1 << 30, size=4))
    assert not np.array_equal(a, pipeline.stage_rng(0, "regen", 1).integers(1 << 30, size=4))
    assert not np.array_equal(a, pipeline.stage_rng(1, "occlude", 1).integers(1 << 30, size=4))


def test_background_heuristic():
    table = synth_scene(preset_layout("tabletop", n=150), 0)
    assert pipeline.background_labels(table) == [0]
    assert pipeline.background_labels(synth_scene(preset_layout("room4", n=150), 0)) == []
    assert pipeline.background_labels(synth_scene(preset_layout("single_sphere", n=50), 0)) == []


def test_parse_respects_background_override(tmp_path):
    scene = synth_scene(preset_layout("tabletop", n=100), 0)
    io.write_ply(tmp_path / "in.ply", scene)
    base = {"scene": str(tmp_path / "in.ply"), "out": str(tmp_path / "o"),
            "stages": ["segment", "parse"], "config": {"segment": {"use_labels": True}}}
    rep = pipeline.run_pipeline(pipeline.load_manifest(base, environ={}))
    assert rep["parse"]["background_labels"] == [0]
    assert [o["id"] for o in rep["parse"]["objects"]] == [1, 2, 3]
    base["config"]["parse"] = {"background": "none"}
    rep = pipeline.run_pipeline(pipeline.load_manifest(base, environ={}))
    assert [o["id"] for o in rep["parse"]["objects"]] == [0, 1, 2, 3]
    assert rep["parse"]["n_background"] == 0


# -- command line ---------------------------------------------------------------


def test_cli_synth_and_segment_with_labels(tmp_path, capsys):
    assert main(["synth", "--preset", "two_blobs", "--param", "n=60", "--out", str(tmp_path / "s")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["labels"] == [0, 1] and info["n_gaussians"] == 120
    code = main(["parse", "--scene", str(tmp_path / "s/scene.ply"), "--out", str(tmp_path / "o")])
    assert code == 2  # parse needs segment outputs
    code = main(["run", "--scene", str(tmp_path / "s/scene.ply"), "--out", str(tmp_path / "o"),
                 "--set", 'stages=["segment","parse"]', "--set", "config.segment.use_labels=true"])
    assert code == 0
    assert (tmp_path / "o/parse/obj_01.ply").is_file()


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"schema": "other"}))
    assert main(["run", "--manifest", str(bad)]) == 2
    assert main(["segment", "--scene", str(tmp_path / "nope.ply"), "--out", str(tmp_path)]) == 2
    broken = tmp_path / "broken.ply"
    broken.write_bytes(b"ply\nformat binary_little_endian 1.0\nend_header\n")
    assert main(["segment", "--scene", str(broken), "--out", str(tmp_path / "o")]) == 3
    assert "segment" in capsys.readouterr().err


def test_cli_eval_miou(tmp_path, capsys):
    a = np.zeros((8, 8), bool)
    a[:, :4] = True
    b = np.zeros((8, 8), bool)
    b[:, 2:6] = True
    io.write_png(tmp_path / "p/x.png", a)
    io.write_png(tmp_path / "g/x.png", b)
    io.write_png(tmp_path / "p/y.png", a)
    io.write_png(tmp_path / "g/y.png", a)
    assert main(["eval-miou", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"),
                 "--out", str(tmp_path / "r")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["mIoU"] == pytest.approx((1 / 3 + 1) / 2, abs=1e-12)
    io.write_png(tmp_path / "p/z.png", a)
    assert main(["eval-miou", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g")]) == 2


def test_cli_render(tmp_path):
    scene = synth_scene(preset_layout("single_sphere", n=80), 0)
    io.write_ply(tmp_path / "s.ply", scene)
    assert main(["render", str(tmp_path / "s.ply"), "--size", "24", "16", "--out", str(tmp_path / "r")]) == 0
    img = io.read_png(tmp_path / "r/color.png")
    assert img.shape == (16, 24, 3)
    assert io.read_label_map(tmp_path / "r/instance.png").max() == 0
