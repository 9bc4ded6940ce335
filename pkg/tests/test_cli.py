import filecmp
import hashlib
import json
import os

import numpy as np
import pytest

from semscene import cli
from semscene.errors import NumericalFailure
from semscene.export import exposed_faces, export_voxels
from semscene.gradsuite import run_grad_suite
from semscene.scenes import load_scene

SMALL_ARGS = ["--scene.grid_dims", "[10,8,10]", "--scene.voxel_size", "0.3",
              "--scene.image_width", "32", "--scene.image_height", "24"]
TINY_NET_ARGS = [
    "--net2d.stem_channels", "4", "--net2d.encoder_blocks", "[[6,2],[8,2]]",
    "--net2d.decoder_channels", "4", "--net2d.feature_channels", "16",
    "--net3d.channels", "4", "--net3d.guidance_channels", "4",
    "--net3d.spatial_attn_channels", "2", "--net3d.feature_in", "16",
    "--net3d.n_rabs", "2",
]
FAST_TRAIN = ["--schedule.pretrain_steps", "4", "--schedule.e2e_steps", "6",
              "--n_scenes", "5"]


def _dir_digest(path):
    digest = {}
    for name in sorted(os.listdir(path)):
        with open(os.path.join(path, name), "rb") as fh:
            digest[name] = hashlib.sha256(fh.read()).hexdigest()
    return digest


def _gen(tmp_path, sub, count=5, seed=60):
    out = str(tmp_path / sub)
    rc = cli.main(["--seed", str(seed), "gen-scenes", "--count", str(count),
                   "--out", out] + SMALL_ARGS)
    assert rc == 0
    return out


class TestGenScenes:
    def test_zero_count_writes_empty_index(self, tmp_path):
        out = str(tmp_path / "empty")
        rc = cli.main(["--seed", "1", "gen-scenes", "--count", "0",
                       "--out", out])
        assert rc == 0
        index = json.loads((tmp_path / "empty" / "index.json").read_text())
        assert index["scenes"] == []

    def test_same_seed_byte_identical_directories(self, tmp_path):
        a = _gen(tmp_path, "a")
        b = _gen(tmp_path, "b")
        assert _dir_digest(a) == _dir_digest(b)

    def test_generated_scenes_validate(self, tmp_path):
        from semscene.scenes import validate_sample
        out = _gen(tmp_path, "v", count=6)
        index = json.loads(open(os.path.join(out, "index.json")).read())
        assert len(index["scenes"]) == 6
        for name in index["scenes"]:
            validate_sample(load_scene(os.path.join(out, name)))


class TestGradCheckCommand:
    def test_default_config_exits_zero(self, capsys):
        rc = cli.main(["grad-check"])
        assert rc == 0
        out = capsys.readouterr().out
        assert out.count("ok") >= 8

    def test_report_lists_required_blocks(self):
        results = run_grad_suite()
        names = set(results)
        for required in ("conv2d", "conv3d-dilated", "ddr",
                         "channel-attention", "spatial-attention", "rab",
                         "projection-scatter", "guidance", "completion",
                         "fused-loss"):
            assert required in names
        assert len(names) >= 8

    def test_injected_wrong_backward_is_named(self, monkeypatch, capsys):
        import semscene.gradsuite as gs
        from semscene.tensor import Tensor, make_op, tensor_sum

        def broken_block(rng):
            x = Tensor(rng.normal(size=6) + 1.5, requires_grad=True)

            def bad_square(t):
                def backward(g):
                    t.accumulate_grad(g * 3.0 * t.data)  # wrong factor
                return make_op(t.data ** 2, (t,), backward)

            return lambda: tensor_sum(bad_square(x)), [x]

        monkeypatch.setattr(gs, "SUITE", gs.SUITE + [("broken", broken_block)])
        rc = cli.main(["grad-check"])
        assert rc == cli.EXIT_NUMERIC
        out = capsys.readouterr().out
        assert "broken" in out and "FAIL" in out

    def test_nonfinite_raises_with_block_name(self):
        from semscene.tensor import Tensor, tensor_sum

        def exploding_block(rng):
            x = Tensor(np.array([1e308]), requires_grad=True)
            return lambda: tensor_sum(x * x * x), [x]

        with pytest.raises(NumericalFailure, match="exploding"):
            run_grad_suite(extra_blocks=[("exploding", exploding_block)])


class TestTrainEvalAblate:
    def _train(self, tmp_path, data, label="full", seed=60):
        ck = str(tmp_path / "ck" / label.replace("/", "_"))
        rep = str(tmp_path / f"report_{label.replace('/', '_')}.txt")
        log = str(tmp_path / "train.log")
        rc = cli.main(["--seed", str(seed), "train", "--data", data,
                       "--checkpoint", ck, "--log", log, "--report", rep,
                       "--ablation.label", f'"{label}"']
                      + self._ablation_flags(label)
                      + SMALL_ARGS + TINY_NET_ARGS + FAST_TRAIN)
        assert rc == 0
        return ck, rep, log

    @staticmethod
    def _ablation_flags(label):
        from semscene.evaluate import AblationConfig
        cfg = AblationConfig.from_label(label)
        return ["--ablation.attention", json.dumps(cfg.attention),
                "--ablation.guidance", json.dumps(cfg.guidance),
                "--ablation.guidance_source", f'"{cfg.guidance_source}"']

    def test_train_writes_checkpoint_log_and_report(self, tmp_path):
        data = _gen(tmp_path, "data")
        ck, rep, log = self._train(tmp_path, data)
        assert os.path.exists(ck + ".manifest")
        assert os.path.exists(ck + ".blob")
        text = open(log).read()
        assert "phase pretrain" in text and "phase end-to-end" in text
        assert "step 0 loss" in text
        assert open(rep).read().startswith("method")
        assert os.path.exists(rep + ".json")

    def test_eval_is_deterministic_and_read_only(self, tmp_path, capsys):
        data = _gen(tmp_path, "data2")
        ck, _, _ = self._train(tmp_path, data)
        before = _dir_digest(data)
        args = ["--seed", "60", "eval", "--data", data, "--checkpoint", ck] \
            + SMALL_ARGS + TINY_NET_ARGS + FAST_TRAIN
        capsys.readouterr()  # drain earlier command output
        assert cli.main(args) == 0
        first = capsys.readouterr().out
        assert cli.main(args) == 0
        second = capsys.readouterr().out
        assert first == second
        assert _dir_digest(data) == before  # inputs untouched

    def test_eval_checkpoint_mismatch_prints_diff(self, tmp_path, capsys):
        data = _gen(tmp_path, "data3")
        ck, _, _ = self._train(tmp_path, data)
        rc = cli.main(["--seed", "60", "eval", "--data", data,
                       "--checkpoint", ck] + SMALL_ARGS + FAST_TRAIN)
        assert rc == cli.EXIT_CONTRACT
        err = capsys.readouterr().err
        assert "net2d/" in err and "vs config" in err

    def test_ablate_emits_five_labeled_rows(self, tmp_path, capsys):
        data = _gen(tmp_path, "data4")
        rep = str(tmp_path / "ablate.txt")
        rc = cli.main(["--seed", "61", "ablate", "--data", data,
                       "--report", rep] + SMALL_ARGS + TINY_NET_ARGS
                      + FAST_TRAIN)
        assert rc == 0
        lines = open(rep).read().strip().splitlines()
        assert len(lines) == 6  # header + five rows
        labels = [line.split()[0] + (" " + line.split()[1]
                                     if line.split()[1].startswith("(") else "")
                  for line in lines[1:]]
        assert labels == ["Ours", "Ours (w/o-Attn)", "Ours (w/o-Seg)",
                          "Ours (basic)", "Ours (Seg-GT)"]
        rows = json.loads(open(rep + ".json").read())
        assert set(rows) == {"full", "w/o-Attn", "w/o-Seg", "basic", "Seg-GT"}

    def test_ablate_full_row_equals_standalone_train(self, tmp_path, capsys):
        data = _gen(tmp_path, "data5")
        _, rep, _ = self._train(tmp_path, data, seed=62)
        standalone = open(rep).read().splitlines()[1]
        arep = str(tmp_path / "ablate2.txt")
        rc = cli.main(["--seed", "62", "ablate", "--data", data,
                       "--report", arep] + SMALL_ARGS + TINY_NET_ARGS
                      + FAST_TRAIN)
        assert rc == 0
        full_row = open(arep).read().splitlines()[1]
        assert full_row == standalone


class TestExportVoxels:
    def test_empty_volume_header_only(self, tmp_path):
        path = str(tmp_path / "empty.ply")
        count = export_voxels(np.zeros((3, 3, 3), np.uint8), path,
                              "surface-mesh")
        assert count == 0
        text = open(path).read()
        assert "element vertex 0" in text and "element face 0" in text

    def test_single_voxel_six_quads(self, tmp_path):
        labels = np.zeros((3, 3, 3), np.uint8)
        labels[1, 1, 1] = 5
        path = str(tmp_path / "one.ply")
        count = export_voxels(labels, path, "surface-mesh")
        assert count == 6
        text = open(path).read()
        assert "element vertex 24" in text
        assert "element face 6" in text

    def test_face_count_matches_neighbor_scan_oracle(self, rng, tmp_path):
        labels = (rng.random((6, 5, 6)) < 0.4).astype(np.uint8) * 3
        # padded-shift oracle: an exposed face is an occupied voxel whose
        # neighbor in that direction is empty
        occ = labels > 0
        padded = np.pad(occ, 1)
        expected = 0
        for axis in range(3):
            for sign in (1, -1):
                neighbor = np.roll(padded, sign, axis=axis)[1:-1, 1:-1, 1:-1]
                expected += int(np.sum(occ & ~neighbor))
        assert len(exposed_faces(labels)) == expected
        count = export_voxels(labels, str(tmp_path / "r.ply"), "surface-mesh")
        assert count == expected

    def test_point_list_records_each_voxel(self, tmp_path):
        labels = np.zeros((2, 2, 2), np.uint8)
        labels[0, 1, 0] = 4
        labels[1, 1, 1] = 9
        path = str(tmp_path / "p.txt")
        count = export_voxels(labels, path, "point-list")
        assert count == 2
        lines = [l for l in open(path) if not l.startswith("#")]
        assert lines == ["0 1 0 4\n", "1 1 1 9\n"]

    def test_cli_gt_and_prediction_paths(self, tmp_path):
        data = _gen(tmp_path, "data6")
        index = json.loads(open(os.path.join(data, "index.json")).read())
        scene = os.path.join(data, index["scenes"][0])
        out = str(tmp_path / "gt.ply")
        rc = cli.main(["export-voxels", "--scene", scene, "--out", out])
        assert rc == 0 and os.path.exists(out)

    def test_unknown_scene_is_io_error(self, tmp_path):
        rc = cli.main(["export-voxels", "--scene",
                       str(tmp_path / "missing"), "--out",
                       str(tmp_path / "x.ply")])
        assert rc == cli.EXIT_IO


def test_override_parsing_rejects_bad_keys(tmp_path):
    rc = cli.main(["--seed", "1", "gen-scenes", "--count", "0",
                   "--out", str(tmp_path / "x"), "--nonsense.key", "5"])
    assert rc == cli.EXIT_CONTRACT


def test_config_file_and_env(tmp_path, monkeypatch, capsys):
    from semscene.experiment import RunConfig, config_to_dict
    cfg_path = tmp_path / "conf.json"
    data = config_to_dict(RunConfig(seed=123))
    cfg_path.write_text(json.dumps(data))
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg_path))
    out = str(tmp_path / "scenes")
    rc = cli.main(["gen-scenes", "--count", "0", "--out", out])
    assert rc == 0
    index = json.loads((tmp_path / "scenes" / "index.json").read_text())
    assert index["seed"] == 123
