import json

import numpy as np
import pytest

from gsavatar.articulation import Pose
from gsavatar.checkpoint import load_checkpoint
from gsavatar.cli import EXIT_INVALID, EXIT_OK, main
from gsavatar.config import Config, ConfigError, load_config, save_config, to_text
from gsavatar.data import load_dataset, load_teacher, read_png
from gsavatar.metrics import psnr
from gsavatar.puppet import build_puppet
from gsavatar.raster import image_to_uint8, rasterize

TINY = """
[paths]
template = builtin:puppet
[data]
n_frames = {frames}
n_views = {views}
width = 40
height = 40
focal = 45.0
heldout_views = {heldout}
[model]
body_resolution = 24
face_resolution = 6
crop_size = 24
[schedule]
pretrain_steps = 2
joint_steps = 4
face_steps = 2
"""


def write_cfg(tmp_path, frames=2, views=3, heldout="2", name="cfg.ini"):
    p = tmp_path / name
    p.write_text(TINY.format(frames=frames, views=views, heldout=heldout))
    return p


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "ds")]) == EXIT_OK
    return root, cfg, root / "ds"


class TestConfig:
    def test_unknown_key(self, tmp_path):
        p = tmp_path / "c.ini"
        p.write_text("[schedule]\njoint_stepz = 3\n")
        with pytest.raises(ConfigError, match="joint_stepz"):
            load_config(p)
        p.write_text("[nope]\na = 1\n")
        with pytest.raises(ConfigError, match="nope"):
            load_config(p)

    def test_bad_values(self, tmp_path):
        p = tmp_path / "c.ini"
        for text in ("[schedule]\njoint_steps = many\n", "[schedule]\njoint_steps = -1\n",
                     "[model]\nactivation = relu\n", "[data]\nheldout_views = 1,x\n", "[loss]\nl1 = -2\n"):
            p.write_text(text)
            with pytest.raises(ConfigError if "joint_steps = -1" not in text and "l1" not in text else ValueError):
                load_config(p)

    def test_round_trip(self, tmp_path):
        cfg = Config()
        cfg.schedule.joint_steps = 17
        cfg.loss.offset = 0.1 + 0.2  # not exactly representable in short decimal
        cfg.data.heldout_views = "1,5"
        save_config(tmp_path / "c.ini", cfg)
        back = load_config(tmp_path / "c.ini")
        assert back == cfg and to_text(back) == to_text(cfg)

    def test_defaults(self):
        cfg = load_config(None)
        assert cfg.train_schedule().joint_steps == 5000 and cfg.heldout_views() == (7,)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.ini")
        assert main(["eval", "--config", str(tmp_path / "missing.ini"), "--gt-self"]) == EXIT_INVALID


class TestSynth:
    def test_single_item(self, tmp_path):
        cfg = write_cfg(tmp_path, frames=1, views=1, heldout="")
        out = tmp_path / "one"
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        assert [p.name for p in (out / "images").iterdir()] == ["f000_v00.png"]
        for name in ("cameras.txt", "poses.txt"):
            rows = [ln for ln in (out / name).read_text().splitlines() if ln and not ln.startswith("#")]
            assert len(rows) == 1
        ds = load_dataset(out)
        assert (ds.n_frames, ds.n_views) == (1, 1)

    def test_replay_bit_exact(self, dataset_dir):
        _, _, root = dataset_dir
        template = build_puppet()
        ds = load_dataset(root)
        teacher = load_teacher(root, template)
        for (f, v) in ds.images:
            cam = ds.cameras[v]
            state = teacher.forward(ds.poses[f], cam, ds.face_camera(f, v))
            r = rasterize(state.posed, cam)
            saved = read_png(root / "images" / f"f{f:03d}_v{v:02d}.png")
            assert image_to_uint8(r.color).tobytes() == saved.tobytes()
            mask = read_png(root / "masks" / f"f{f:03d}_v{v:02d}.png")
            assert set(np.unique(mask)) <= {0, 255}
            np.testing.assert_array_equal(mask == 255, r.alpha > 0.5)

    def test_config_saved(self, dataset_dir):
        _, cfg, root = dataset_dir
        assert load_config(root / "config.ini") == load_config(cfg)

    def test_non_empty_needs_force(self, dataset_dir, tmp_path):
        _, cfg, _ = dataset_dir
        out = tmp_path / "busy"
        out.mkdir()
        (out / "x").write_text("keep")
        assert main(["synth", "--config", str(cfg), "--out", str(out)]) == EXIT_INVALID
        assert main(["synth", "--config", str(cfg), "--out", str(out), "--force"]) == EXIT_OK

    def test_seed_changes_data(self, dataset_dir, tmp_path):
        _, cfg, root = dataset_dir
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s1"), "--seed", "1"]) == EXIT_OK
        assert (tmp_path / "s1" / "poses.txt").read_text() != (root / "poses.txt").read_text()


class TestDatasetValidation:
    def test_missing_mask(self, dataset_dir, tmp_path, capsys):
        import shutil
        _, cfg, root = dataset_dir
        broken = tmp_path / "broken"
        shutil.copytree(root, broken)
        (broken / "masks" / "f001_v00.png").unlink()
        (broken / "images" / "f000_v01.png").write_bytes((broken / "images" / "f000_v00.png").read_bytes()[:50])
        rc = main(["train", "--config", str(cfg), "--dataset", str(broken), "--out", str(tmp_path / "run")])
        err = capsys.readouterr().err
        assert rc == EXIT_INVALID
        assert "f001_v00.png: missing mask" in err and "checksum mismatch" in err

    def test_camera_mismatch(self, dataset_dir, tmp_path, capsys):
        import shutil
        _, cfg, root = dataset_dir
        broken = tmp_path / "cams"
        shutil.copytree(root, broken)
        lines = (broken / "cameras.txt").read_text().splitlines()
        (broken / "cameras.txt").write_text("\n".join(lines[:-1]) + "\n")
        rc = main(["eval", "--config", str(cfg), "--dataset", str(broken), "--gt-self", "--out", str(tmp_path / "e"),
                   "--views", "0"])
        assert rc == EXIT_INVALID and "cameras" in capsys.readouterr().err


class TestFit:
    def target(self, tmp_path, template, noise=0.0, seed=0):
        rng = np.random.default_rng(seed)
        pose = Pose(rng.normal(0, 0.2, (template.n_joints, 3)), rng.normal(0, 0.05, 3))
        V, J = template.posed(pose, rng.normal(0, 0.5, template.shape_dirs.shape[-1]))
        V = V + rng.normal(0, noise, V.shape)
        J = J + rng.normal(0, 3 * noise, J.shape)
        p = tmp_path / f"target{seed}_{noise}.json"
        p.write_text(json.dumps({"vertices": V.tolist(), "joints": J.tolist()}))
        return p

    def test_self_fit(self, tmp_path):
        t = build_puppet()
        p = tmp_path / "rest.json"
        p.write_text(json.dumps({"vertices": t.vertices.tolist(), "joints": t.skeleton.rest_joints.tolist()}))
        assert main(["fit", "--target", str(p), "--out", str(tmp_path / "fit")]) == EXIT_OK
        rep = json.loads((tmp_path / "fit" / "fit.json").read_text())
        assert np.abs(rep["betas"]).max() < 1e-6 and np.abs(rep["rotations"]).max() < 1e-6
        assert rep["vertex_rms"] < 1e-6

    def test_tolerance_exit_code(self, tmp_path):
        t = build_puppet()
        p = self.target(tmp_path, t, noise=0.01)
        cfg = tmp_path / "c.ini"
        cfg.write_text("[fit]\ntolerance = 1e-4\n")
        assert main(["fit", "--config", str(cfg), "--target", str(p), "--out", str(tmp_path / "a")]) == EXIT_INVALID
        cfg.write_text("[fit]\ntolerance = 0.1\n")
        assert main(["fit", "--config", str(cfg), "--target", str(p), "--out", str(tmp_path / "b")]) == EXIT_OK

    def test_lambda_forwarded(self, tmp_path):
        t = build_puppet()
        p = self.target(tmp_path, t, noise=0.01, seed=1)
        cfg = tmp_path / "c.ini"
        cfg.write_text("[fit]\ntolerance = 1.0\n")
        reps = {}
        for lam in ("0", "10"):
            assert main(["fit", "--config", str(cfg), "--target", str(p), "--lam", lam,
                         "--out", str(tmp_path / lam)]) == EXIT_OK
            reps[lam] = json.loads((tmp_path / lam / "fit.json").read_text())
        assert reps["0"]["lam"] == 0.0 and reps["10"]["lam"] == 10.0
        assert reps["10"]["joint_rms"] < reps["0"]["joint_rms"]
        assert reps["10"]["vertex_rms"] >= reps["0"]["vertex_rms"]
        assert load_config(tmp_path / "10" / "config.ini").fit.lam == 10.0

    def test_shape_mismatch(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"vertices": [[0, 0, 0]], "joints": [[0, 0, 0]]}))
        assert main(["fit", "--target", str(p), "--out", str(tmp_path / "x")]) == EXIT_INVALID
        assert "do not match" in capsys.readouterr().err

    def test_no_target(self, tmp_path):
        assert main(["fit", "--out", str(tmp_path / "x")]) == EXIT_INVALID


class TestTrainRenderEval:
    def test_eval_gt_self(self, dataset_dir, tmp_path, capsys):
        _, cfg, root = dataset_dir
        out = tmp_path / "e"
        assert main(["eval", "--config", str(cfg), "--dataset", str(root), "--gt-self", "--out", str(out)]) == EXIT_OK
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "view,frames,psnr,ssim,head_psnr,head_ssim"
        view = lines[1].split(",")
        assert view[0] == "2" and float(view[2]) == 99.0 and float(view[3]) == pytest.approx(1.0)
        assert "99.0000" in capsys.readouterr().out

    def test_eval_bad_view(self, dataset_dir, tmp_path):
        _, cfg, root = dataset_dir
        assert main(["eval", "--config", str(cfg), "--dataset", str(root), "--gt-self", "--views", "9",
                     "--out", str(tmp_path / "e")]) == EXIT_INVALID
        assert main(["eval", "--config", str(cfg), "--dataset", str(root), "--out", str(tmp_path / "e")]) == EXIT_INVALID

    def test_train_deterministic_and_render(self, dataset_dir, tmp_path):
        _, cfg, root = dataset_dir
        for k in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--dataset", str(root), "--out", str(tmp_path / k)]) == EXIT_OK
        for name in ("pretrain.ckpt", "joint.ckpt", "face.ckpt", "loss.csv", "config.ini"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        assert len((tmp_path / "a" / "loss.csv").read_text().splitlines()) == 1 + 8
        # the saved config re-runs to the same result
        assert main(["train", "--config", str(tmp_path / "a" / "config.ini"), "--dataset", str(root),
                     "--out", str(tmp_path / "c")]) == EXIT_OK
        assert (tmp_path / "a" / "face.ckpt").read_bytes() == (tmp_path / "c" / "face.ckpt").read_bytes()
        assert main(["train", "--config", str(cfg), "--dataset", str(root), "--out", str(tmp_path / "a")]) == EXIT_INVALID

        png = tmp_path / "r.png"
        assert main(["render", "--config", str(cfg), "--checkpoint", str(tmp_path / "a" / "face.ckpt"),
                     "--dataset", str(root), "--frame", "1", "--view", "0", "--out", str(png)]) == EXIT_OK
        img = read_png(png)
        assert img.shape == (40, 40, 3) and img.dtype == np.uint8 and img.max() > 0
        assert main(["render", "--config", str(cfg), "--checkpoint", str(tmp_path / "a" / "face.ckpt"),
                     "--dataset", str(root), "--frame", "5", "--out", str(png)]) == EXIT_INVALID

        out = tmp_path / "ev"
        assert main(["eval", "--config", str(cfg), "--dataset", str(root), "--checkpoint",
                     str(tmp_path / "a" / "face.ckpt"), "--views", "0,1", "--out", str(out)]) == EXIT_OK
        assert len((out / "metrics.csv").read_text().splitlines()) == 4

    def test_stage_and_init(self, dataset_dir, tmp_path):
        _, cfg, root = dataset_dir
        assert main(["train", "--config", str(cfg), "--dataset", str(root), "--out", str(tmp_path / "a"),
                     "--stage", "joint", "--views", "0"]) == EXIT_OK
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["config.ini", "joint.ckpt", "loss.csv"]
        assert {line.split(",")[3] for line in (tmp_path / "a" / "loss.csv").read_text().splitlines()[1:]} == {"0"}
        assert main(["train", "--config", str(cfg), "--dataset", str(root), "--out", str(tmp_path / "b"),
                     "--stage", "face", "--init", str(tmp_path / "a" / "joint.ckpt")]) == EXIT_OK
        assert load_checkpoint(tmp_path / "b" / "face.ckpt").meta["stage"] == "face"

    def test_render_pose_file(self, dataset_dir, tmp_path):
        # a novel pose from an explicit pose file renders with the teacher checkpoint
        _, cfg, root = dataset_dir
        template = build_puppet()
        lines = (root / "poses.txt").read_text().splitlines()
        (tmp_path / "p.txt").write_text(lines[1] + "\n")
        png = tmp_path / "t.png"
        assert main(["render", "--config", str(cfg), "--checkpoint", str(root / "teacher.ckpt"), "--dataset", str(root),
                     "--pose-file", str(tmp_path / "p.txt"), "--view", "1", "--out", str(png)]) == EXIT_OK
        ds = load_dataset(root)
        assert psnr(read_png(png) / 255.0, ds.image(0, 1)) == float("inf")
        assert template.n_joints == 12

    def test_corrupt_checkpoint(self, dataset_dir, tmp_path, capsys):
        _, cfg, root = dataset_dir
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"not a checkpoint")
        assert main(["render", "--config", str(cfg), "--checkpoint", str(bad), "--dataset", str(root),
                     "--out", str(tmp_path / "x.png")]) == EXIT_INVALID
        assert "error:" in capsys.readouterr().err
