import json

import numpy as np
import pytest
from PIL import Image

from anyseg import cli
from anyseg import datagen as dg
from anyseg import geometry

TINY = """
model.image_size = 32
model.image_width = 16
model.image_blocks = 1
model.image_heads = 2
model.seg_width = 32
model.seg_blocks = 0
model.seg_stem_depth = 2
model.seg_heads = 2
model.dec_width = 32
model.dec_heads = 2
model.dec_layers = 2
model.n_queries = 4
model.lm_width = 32
model.lm_blocks = 1
model.lm_heads = 2
model.max_len = 128
model.region_points = 4
stage1.steps = {s1}
stage1.batch_size = 4
stage1.augment = false
stage2.steps = 2
stage2.batch_size = 2
stage3.steps = {s3}
stage3.batch_size = 1
stage3.lr = 0.002
"""
SCENE = dg.SceneConfig(size=32, min_shapes=2, max_shapes=3, min_radius=4, max_radius=7, min_area=8)


def _write_cfg(tmp_path, s1=2, s3=2):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY.format(s1=s1, s3=s3))
    return str(p)


def test_datagen_and_oracle_eval(tmp_path):
    out = tmp_path / "data"
    code = cli.main(["datagen", "--out", str(out), "--n", "4", "--seed", "3",
                     "--tasks", "generic,referring,interactive,vgd"])
    assert code == 0
    assert json.loads((out / "manifest.json").read_text())["status"] == "ok"
    assert sorted(dg.load_corpus(out)) == ["generic", "interactive", "referring", "vgd"]
    rep = tmp_path / "rep" / "report.json"
    assert cli.main(["eval", "--data", str(out), "--report", str(rep), "--oracle", "--overlays", "1"]) == 0
    metrics = json.loads(rep.read_text())["metrics"]
    assert metrics and all(v == 1.0 for vals in metrics.values() for v in vals.values() if v is not None)
    assert (tmp_path / "rep" / "overlays").is_dir()
    assert (tmp_path / "rep" / "report.manifest.json").exists()


def test_datagen_byte_identical(tmp_path):
    for k in range(2):
        assert cli.main(["datagen", "--out", str(tmp_path / f"d{k}"), "--n", "2", "--tasks", "vgd"]) == 0
    a = (tmp_path / "d0" / "vgd" / "annotations.jsonl").read_bytes()
    b = (tmp_path / "d1" / "vgd" / "annotations.jsonl").read_bytes()
    assert a == b


def test_usage_and_data_errors(tmp_path, capsys):
    assert cli.main(["train", "--stage", "2", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == cli.EXIT_USAGE
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["status"] == "error"
    assert cli.main(["bogus"]) == cli.EXIT_USAGE
    assert cli.main(["eval", "--data", str(tmp_path), "--report", str(tmp_path / "r.json"), "--oracle"]) == cli.EXIT_DATA
    assert cli.main(["datagen", "--out", str(tmp_path / "x"), "--tasks", "nope"]) == cli.EXIT_USAGE
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.nope = 1\n")
    assert cli.main(["train", "--stage", "1", "--data", str(tmp_path), "--out", str(tmp_path / "y"), "--config", str(bad)]) == cli.EXIT_USAGE


def test_train_chain_and_infer_overfit(tmp_path):
    # one scene with a uniquely colored red circle, learned by a short three-stage chain
    rng = np.random.default_rng(4)
    red_circle = dg.CATEGORIES.index("red circle")
    while True:
        scene = dg.generate_scene(rng, SCENE)
        cats = [c for c, _ in scene.regions]
        if cats.count(red_circle) == 1:
            break
    target = next(m for c, m in scene.regions if c == red_circle)
    data = tmp_path / "data"
    ref = dg.make_task_sample("referring", scene, rng)
    while ref.regions[0][0] != red_circle:
        ref = dg.make_task_sample("referring", scene, rng)
    for task, samples in {"generic": [dg.make_task_sample("generic", scene, rng)], "referring": [ref],
                          "caption": [dg.make_task_sample("caption", scene, rng)]}.items():
        dg.save_dataset(data / task, samples, dg.DatasetSpec(task, 1, task, 1 / 3))
    cfg = _write_cfg(tmp_path, s1=150, s3=150)
    run = tmp_path / "run"
    assert cli.main(["train", "--stage", "1", "--data", str(data), "--out", str(run), "--config", cfg]) == 0
    assert cli.main(["train", "--stage", "3", "--data", str(data), "--out", str(run), "--config", cfg,
                     "--ckpt", str(run / "stage1.pt")]) == cli.EXIT_USAGE
    assert cli.main(["train", "--stage", "2", "--data", str(data), "--out", str(run), "--config", cfg,
                     "--ckpt", str(run / "stage1.pt")]) == 0
    assert cli.main(["train", "--stage", "3", "--data", str(data), "--out", str(run), "--config", cfg,
                     "--ckpt", str(run / "stage2.pt")]) == 0
    assert (run / "stage3_loss.png").exists()
    img = tmp_path / "scene.png"
    Image.fromarray(np.round(scene.image * 255).astype(np.uint8)).save(img)
    out = tmp_path / "infer"
    assert cli.main(["infer", "--image", str(img), "--ckpt", str(run / "stage3.pt"), "--config", cfg,
                     "--task", "referring", "--query", "red circle", "--out", str(out), "--no-decode"]) == 0
    rec = json.loads((out / "instances.json").read_text())
    assert len(rec["instances"]) == 1
    assert geometry.iou(geometry.rle_decode(rec["instances"][0]["rle"]), target) >= 0.9
    assert (out / "overlay.png").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["checkpoint_hash"] and man["config_hash"]
    # other config -> checkpoint hash mismatch is a data error
    other = tmp_path / "other.cfg"
    other.write_text(TINY.format(s1=1, s3=1).replace("model.n_queries = 4", "model.n_queries = 5"))
    assert cli.main(["infer", "--image", str(img), "--ckpt", str(run / "stage3.pt"), "--config", str(other),
                     "--task", "referring", "--query", "red circle", "--out", str(out)]) == cli.EXIT_DATA


def test_prompt_file(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps([{"kind": "point", "xy": [5, 6]}, {"kind": "box", "box": [1, 2, 4, 8]}]))
    prompts = cli.load_prompt_file(p, (16, 16))
    assert [q.kind for q in prompts] == ["point", "box"]
    assert prompts[0].rendering[6, 5] and prompts[0].rendering.sum() == 9
    assert prompts[1].rendering.sum() == 18
    p.write_text(json.dumps({"kind": "lasso"}))
    with pytest.raises(dg.DataError):
        cli.load_prompt_file(p, (16, 16))
