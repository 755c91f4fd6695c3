import json

import numpy as np
import pytest

from ordocc.cli import main
from ordocc.config import ConfigError, PipelineConfig
from ordocc.export import encode_ply, read_ply_vertices
from ordocc.grid import (
    CostLabel,
    GridConfig,
    LabelSpace,
    SemanticLabel,
    VoxelGrid,
    index_to_center,
    load_grid,
    save_grid,
)
from ordocc.ingest import PointCloudFrame, Pose
from ordocc.synthetic import WallScene, forward_camera, write_sequence

SMALL = GridConfig((0.0, 0.0, 0.0), (6, 6, 6), 0.2)


def flat_sequence(root, n=3):
    g = np.arange(0.05, 4.0, 0.1)
    x, y = np.meshgrid(g, g - 2.0, indexing="ij")
    xyz = np.column_stack([x.ravel(), y.ravel(), np.zeros(x.size)])
    cloud = PointCloudFrame.from_points(xyz, np.full(len(xyz), SemanticLabel.GRASS))
    poses = [Pose(np.eye(3), [0.1 * i, 0, 0]) for i in range(n)]
    return write_sequence(root, [cloud] * n, poses, forward_camera())


def write_config(path, d):
    path.write_text(json.dumps(d))
    return str(path)


FLAT_CFG = {"grid": {"origin": [0.0, -2.0, -1.0], "dims": [20, 20, 15], "voxel_size": 0.2},
            "ingest": {"window": 3}, "annotate": {"fov_mask": False}}


def test_annotate_flat_field(tmp_path):
    seq = flat_sequence(tmp_path / "seq")
    cfg = write_config(tmp_path / "c.json", FLAT_CFG)
    out = tmp_path / "out"
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(out)]) == 0
    cost = load_grid(out / "cost.ordg").volume()
    sem = load_grid(out / "semantic.ordg").volume()
    assert (sem[:, :, 5] == SemanticLabel.GRASS).all()   # z in [0, 0.2)
    assert (cost[:, :, 5] == CostLabel.FREE).all()
    assert np.count_nonzero(cost) == 400
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["frame_window"] == [0, 3]
    assert manifest["mask"]["masked"] == 0
    assert manifest["config"]["grid"]["dims"] == [20, 20, 15]
    assert manifest["config"]["vehicle"]["lidar_height_m"] == 2.0


def test_annotate_dry_run_writes_nothing(tmp_path):
    seq = flat_sequence(tmp_path / "seq")
    out = tmp_path / "out"
    cfg = write_config(tmp_path / "c.json", FLAT_CFG)
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(out), "--dry-run"]) == 0
    assert not out.exists()


def test_annotate_missing_poses(tmp_path, capsys):
    seq = flat_sequence(tmp_path / "seq")
    (seq / "poses.txt").unlink()
    assert main(["annotate", str(seq), "--out", str(tmp_path / "o")]) == 2
    assert str(seq / "poses.txt") in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_annotate_bad_config(tmp_path, capsys):
    seq = flat_sequence(tmp_path / "seq")
    cfg = write_config(tmp_path / "c.json", {"vehicle": {"friction": -1}})
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    cfg = write_config(tmp_path / "c2.json", {"vehicle": {"wheel_size": 1}})
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(tmp_path / "o")]) == 3
    assert "wheel_size" in capsys.readouterr().err


def test_annotate_key_outside_window(tmp_path):
    seq = flat_sequence(tmp_path / "seq")
    cfg = write_config(tmp_path / "c.json", FLAT_CFG)
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(tmp_path / "o"),
                 "--key", "2", "--frames", "0:2"]) == 2
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(tmp_path / "o"), "--key", "9"]) == 2


def test_argparse_error_is_input_error():
    assert main(["annotate"]) == 2
    assert main(["nope"]) == 2


def test_wall_scene_end_to_end(tmp_path):
    scene = WallScene()
    seq = scene.write(tmp_path / "seq")
    cfg = write_config(tmp_path / "c.json", scene.config_json())
    out = tmp_path / "out"
    assert main(["annotate", str(seq), "--config", cfg, "--out", str(out)]) == 0
    cost = load_grid(out / "cost.ordg").volume()
    kz = scene.ground_voxel_z()
    radius = PipelineConfig().neighborhood.radius
    for i, j in scene.wall_adjacent_cells(radius):
        assert cost[i, j, kz] == CostLabel.LETHAL
    for i, j in scene.corridor_cells():
        assert cost[i, j, kz] == CostLabel.LETHAL
    free = [cost[i, j, kz] for i, j in scene.open_cells(radius)]
    assert all(c in (CostLabel.FREE, CostLabel.UNKNOWN) for c in free)
    assert free.count(CostLabel.FREE) > 0.7 * len(free)


def cloud_files(tmp_path, xyz, labels):
    f = PointCloudFrame.from_points(np.asarray(xyz, float).reshape(-1, 3), np.asarray(labels))
    cb, lb = f.to_bytes()
    (tmp_path / "c.bin").write_bytes(cb)
    (tmp_path / "c.label").write_bytes(lb)
    return str(tmp_path / "c.bin"), str(tmp_path / "c.label")


def test_bki_empty_cloud(tmp_path):
    cloud, labels = cloud_files(tmp_path, np.zeros((0, 3)), np.zeros(0))
    cfg = write_config(tmp_path / "k.json", {"grid": SMALL.to_dict()})
    out = tmp_path / "b.ordg"
    assert main(["bki", cloud, "--labels", labels, "--config", cfg, "--out", str(out)]) == 0
    g = load_grid(out)
    assert g.config == SMALL and not g.labels.any()


def test_bki_plane_matches_module(tmp_path):
    from ordocc.bki import BkiConfig, complete_scene
    g = np.arange(0.05, 1.2, 0.1)
    x, y = np.meshgrid(g, g, indexing="ij")
    xyz = np.column_stack([x.ravel(), y.ravel(), np.full(x.size, 0.55)])
    lab = np.full(len(xyz), SemanticLabel.GRASS)
    cloud, labels = cloud_files(tmp_path, xyz, lab)
    cfg = write_config(tmp_path / "k.json", {"grid": SMALL.to_dict()})
    out = tmp_path / "b.ordg"
    assert main(["bki", cloud, "--labels", labels, "--config", cfg, "--out", str(out)]) == 0
    want = complete_scene(xyz.astype(np.float32).astype(float), lab, SMALL, BkiConfig())
    assert load_grid(out) == want
    assert (load_grid(out).volume()[:, :, 2] == SemanticLabel.GRASS).all()


def test_bki_bad_s(tmp_path, capsys):
    cloud, labels = cloud_files(tmp_path, [[0.1, 0.1, 0.1]], [1])
    cfg = write_config(tmp_path / "k.json", {"bki": {"S": [[1, 0, 0], [0, -1, 0], [0, 0, 1]]}})
    assert main(["bki", cloud, "--labels", labels, "--config", cfg, "--out", str(tmp_path / "b")]) == 3
    assert "positive definite" in capsys.readouterr().err


def test_eval_identity_and_mismatch(tmp_path, capsys):
    rng = np.random.default_rng(0)
    g = VoxelGrid(SMALL, rng.choice([0, 1, 2, 255], SMALL.num_voxels).astype(np.uint8))
    save_grid(g, tmp_path / "a.ordg")
    assert main(["eval", str(tmp_path / "a.ordg"), str(tmp_path / "a.ordg")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["miou"] == 1.0 and rep["sc_iou"] == 1.0
    c = VoxelGrid(SMALL, rng.choice([0, 1, 4], SMALL.num_voxels).astype(np.uint8), LabelSpace.COST)
    save_grid(c, tmp_path / "c.ordg")
    assert main(["eval", str(tmp_path / "c.ordg"), str(tmp_path / "a.ordg")]) == 2
    assert "label-space" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "a.ordg"), str(tmp_path / "a.ordg"), "--classes", "cost"]) == 2


def test_eval_fixture_and_losses(tmp_path, capsys):
    cfg = GridConfig((0.0, 0.0, 0.0), (5, 1, 1), 0.2)
    save_grid(VoxelGrid(cfg, np.array([1, 2, 2, 0, 1], np.uint8)), tmp_path / "p.ordg")
    save_grid(VoxelGrid(cfg, np.array([1, 1, 2, 2, 0], np.uint8)), tmp_path / "g.ordg")
    probs = np.full((5, 3), 1 / 3)
    np.save(tmp_path / "p.npy", probs)
    assert main(["eval", str(tmp_path / "p.ordg"), str(tmp_path / "g.ordg"), "--probs", str(tmp_path / "p.npy")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["confusion"][1][:3] == [0, 1, 1] and rep["confusion"][2][:3] == [1, 0, 1]
    assert rep["per_class_iou"]["grass"] == pytest.approx(1 / 3)
    assert rep["per_class_iou"]["tree"] == pytest.approx(1 / 3)
    assert rep["loss"]["ce"] == pytest.approx(np.log(3))


def test_eval_corrupt_grid(tmp_path):
    (tmp_path / "bad.ordg").write_bytes(b"NOPE" + b"\x00" * 40)
    assert main(["eval", str(tmp_path / "bad.ordg"), str(tmp_path / "bad.ordg")]) == 2


def test_export_counts(tmp_path):
    empty = VoxelGrid.filled(SMALL, 0)
    save_grid(empty, tmp_path / "e.ordg")
    assert main(["export", str(tmp_path / "e.ordg"), "--out", str(tmp_path / "e.ply")]) == 0
    data = (tmp_path / "e.ply").read_bytes()
    assert b"element vertex 0\n" in data and read_ply_vertices(data).shape == (0, 7)

    vol = np.zeros(SMALL.dims, np.uint8)
    vol[1, 2, 3] = SemanticLabel.TREE
    one = VoxelGrid(SMALL, vol.ravel())
    v = read_ply_vertices(encode_ply(one))
    np.testing.assert_allclose(v[0, :3], index_to_center((1, 2, 3), SMALL), atol=1e-4)
    assert v[0, 6] == SemanticLabel.TREE

    rng = np.random.default_rng(1)
    g = VoxelGrid(SMALL, rng.choice([0, 1, 2, 255], SMALL.num_voxels).astype(np.uint8))
    save_grid(g, tmp_path / "g.ordg")
    for binary in ([], ["--binary"]):
        assert main(["export", str(tmp_path / "g.ordg"), "--out", str(tmp_path / "g.ply"), *binary]) == 0
        v = read_ply_vertices((tmp_path / "g.ply").read_bytes())
        assert len(v) == int(np.sum((g.labels != 0) & (g.labels != 255)))


def test_export_palette(tmp_path):
    vol = np.zeros(SMALL.dims, np.uint8)
    vol[0, 0, 0] = SemanticLabel.GRASS
    save_grid(VoxelGrid(SMALL, vol.ravel()), tmp_path / "g.ordg")
    (tmp_path / "pal.json").write_text(json.dumps({"grass": [1, 2, 3]}))
    assert main(["export", str(tmp_path / "g.ordg"), "--out", str(tmp_path / "g.ply"),
                 "--palette", str(tmp_path / "pal.json")]) == 0
    assert read_ply_vertices((tmp_path / "g.ply").read_bytes())[0, 3:6].tolist() == [1, 2, 3]
    (tmp_path / "bad.json").write_text(json.dumps({"lava": [1, 2, 3]}))
    assert main(["export", str(tmp_path / "g.ordg"), "--out", str(tmp_path / "x.ply"),
                 "--palette", str(tmp_path / "bad.json")]) == 3


def test_features_csv(tmp_path):
    seq = flat_sequence(tmp_path / "seq")
    cfg = write_config(tmp_path / "c.json", FLAT_CFG)
    assert main(["features", str(seq), "--config", cfg, "--out", str(tmp_path / "f.csv")]) == 0
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert len(lines) == 401 and lines[0].startswith("i,j,elevation")


def test_config_roundtrip_and_rejections():
    cfg = PipelineConfig()
    assert PipelineConfig.from_json(cfg.to_json()).to_json() == cfg.to_json()
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"extra": {}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"grid": {"voxel_size": -1}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"ingest": {"id_map": "kitti"}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_json({"cost_table": {"grass": "free"}})
    c = PipelineConfig.from_json({"ingest": {"id_map": {"7": "tree"}, "ground_classes": ["grass"]}})
    assert c.ingest.resolved_id_map() == {7: SemanticLabel.TREE}
    assert c.ingest.ground_classes == {SemanticLabel.GRASS}
