import gzip
import hashlib

import numpy as np
import pytest

from stucknet.cli import main
from stucknet.data import write_idx_images, write_idx_labels


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    """Tiny fake fashion-mnist in canonical IDX layout."""
    root = tmp_path_factory.mktemp("data")
    rng = np.random.default_rng(0)
    d = root / "fashion-mnist"
    d.mkdir()
    prototypes = rng.integers(0, 256, (10, 28, 28))
    for split, fname_i, fname_l, n in (
        ("train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte", 400),
        ("test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 120),
    ):
        labels = rng.integers(0, 10, n)
        noise = rng.normal(0, 40, (n, 28, 28))
        images = np.clip(prototypes[labels] + noise, 0, 255).astype(np.uint8)
        write_idx_images(d / fname_i, images)
        write_idx_labels(d / fname_l, labels.astype(np.uint8))
    return root


def run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


class TestUsage:
    def test_help_everywhere(self, capsys):
        for args in ([], ["train"], ["fetch"], ["attack"], ["sweep"], ["reproduce"]):
            with pytest.raises(SystemExit) as e:
                main(args + ["--help"])
            assert e.value.code == 0
            capsys.readouterr()

    def test_unknown_dataset_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["fetch", "--dataset", "cifar10"])
        assert e.value.code == 2

    def test_invalid_figure_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["reproduce", "--figure", "7"])
        assert e.value.code == 2


class TestFetch:
    def test_cached_files_up_to_date(self, tmp_path, capsys):
        # local file:// manifest, everything already fetched
        rng = np.random.default_rng(1)
        mirror = tmp_path / "mirror"
        mirror.mkdir()
        dest = tmp_path / "data"
        lines = []
        names = {
            "train-images": "train-images-idx3-ubyte",
            "train-labels": "train-labels-idx1-ubyte",
            "test-images": "t10k-images-idx3-ubyte",
            "test-labels": "t10k-labels-idx1-ubyte",
        }
        for role, fname in names.items():
            if "images" in role:
                payload = (
                    b"\x00\x00\x08\x03\x00\x00\x00\x01\x00\x00\x00\x1c\x00\x00\x00\x1c"
                    + bytes(784)
                )
            else:
                payload = b"\x00\x00\x08\x01\x00\x00\x00\x01\x05"
            gz = mirror / (fname + ".gz")
            gz.write_bytes(gzip.compress(payload, mtime=0))
            sha = hashlib.sha256(gz.read_bytes()).hexdigest()
            lines.append(f"{role} {gz.as_uri()} {sha} {dest / fname}")
        manifest = tmp_path / "toy.manifest"
        manifest.write_text("\n".join(lines) + "\n")

        code, out, _ = run(capsys, ["fetch", "--dataset", "mnist", "--manifest", str(manifest)])
        assert code == 0
        code, out, _ = run(capsys, ["fetch", "--dataset", "mnist", "--manifest", str(manifest)])
        assert code == 0
        assert "up to date" in out

    def test_checksum_failure_names_file(self, tmp_path, capsys):
        gz = tmp_path / "train-images-idx3-ubyte.gz"
        gz.write_bytes(gzip.compress(bytes(800)))
        lines = [
            f"train-images {gz.as_uri()} {'0' * 64} {tmp_path / 'out' / 'train-images-idx3-ubyte'}"
        ]
        for role, fname in (
            ("train-labels", "train-labels-idx1-ubyte"),
            ("test-images", "t10k-images-idx3-ubyte"),
            ("test-labels", "t10k-labels-idx1-ubyte"),
        ):
            lines.append(f"{role} {gz.as_uri()} {'0' * 64} {tmp_path / 'out' / fname}")
        manifest = tmp_path / "bad.manifest"
        manifest.write_text("\n".join(lines) + "\n")
        code, _, err = run(capsys, ["fetch", "--dataset", "mnist", "--manifest", str(manifest)])
        assert code == 1
        assert "train-images-idx3-ubyte.gz" in err


class TestTrain:
    def test_train_writes_model_and_reports_accuracy(self, data_dir, tmp_path, capsys):
        out = tmp_path / "model.mnna"
        code, stdout, _ = run(
            capsys,
            ["train", "--data-dir", str(data_dir), "--epochs", "2", "--seed", "1",
             "--out", str(out)],
        )
        assert code == 0
        assert out.exists()
        assert "clean test accuracy" in stdout

    def test_repeated_invocation_byte_identical(self, data_dir, tmp_path, capsys):
        a, b = tmp_path / "a.mnna", tmp_path / "b.mnna"
        for path in (a, b):
            code, _, _ = run(
                capsys,
                ["train", "--data-dir", str(data_dir), "--epochs", "1", "--seed", "3",
                 "--p-train", "0.2", "--out", str(path)],
            )
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_p_train(self, data_dir, tmp_path, capsys):
        code, _, err = run(
            capsys,
            ["train", "--data-dir", str(data_dir), "--p-train", "1.5",
             "--out", str(tmp_path / "x.mnna")],
        )
        assert code == 1
        assert "p_train" in err

    def test_config_file_flag_precedence(self, data_dir, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[train]\nepochs = 1\nseed = 9\n")
        out1, out2 = tmp_path / "c1.mnna", tmp_path / "c2.mnna"
        run(capsys, ["--config", str(cfg), "train", "--data-dir", str(data_dir),
                     "--out", str(out1)])
        # flag overrides the config's seed; result must differ
        run(capsys, ["--config", str(cfg), "train", "--data-dir", str(data_dir),
                     "--seed", "10", "--out", str(out2)])
        assert out1.read_bytes() != out2.read_bytes()


@pytest.fixture(scope="module")
def model(data_dir, tmp_path_factory):
    path = tmp_path_factory.mktemp("m") / "model.mnna"
    assert main(["train", "--data-dir", str(data_dir), "--epochs", "2",
                 "--seed", "1", "--out", str(path)]) == 0
    return path


class TestAttack:
    def test_epsilon_zero_clean_equals_adversarial(self, data_dir, model, capsys):
        code, out, _ = run(
            capsys,
            ["attack", "--data-dir", str(data_dir), "--model", str(model),
             "--epsilon", "0", "--seed", "0"],
        )
        assert code == 0
        lines = out.strip().splitlines()
        clean = lines[0].split(":")[1]
        adv = lines[1].split(":")[1]
        assert clean == adv

    def test_corrupted_model_file(self, data_dir, tmp_path, capsys):
        bad = tmp_path / "bad.mnna"
        bad.write_bytes(b"JUNKJUNKJUNK")
        code, _, err = run(
            capsys,
            ["attack", "--data-dir", str(data_dir), "--model", str(bad),
             "--epsilon", "0.1"],
        )
        assert code == 1
        assert "not a model file" in err

    def test_negative_epsilon(self, data_dir, model, capsys):
        code, _, err = run(
            capsys,
            ["attack", "--data-dir", str(data_dir), "--model", str(model),
             "--epsilon", "-0.5"],
        )
        assert code == 1


class TestSweepAndReproduce:
    def test_sweep_writes_csv(self, data_dir, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        code, stdout, _ = run(
            capsys,
            ["sweep", "--data-dir", str(data_dir), "--epochs", "1", "--seed", "2",
             "--p-inf", "0.1", "--epsilons", "0,0.1", "--realizations", "2",
             "--workers", "1", "--out", str(out)],
        )
        assert code == 0
        assert out.exists()
        assert str(out) in stdout
        assert out.read_text().count("\n") >= 5  # header + 2 eps x 2 realizations

    def test_reproduce_prints_artifacts(self, data_dir, tmp_path, capsys):
        code, stdout, _ = run(
            capsys,
            ["reproduce", "--figure", "3", "--data-dir", str(data_dir),
             "--epochs", "1", "--realizations", "2", "--workers", "2",
             "--out", str(tmp_path / "results")],
        )
        assert code == 0
        assert "data.csv" in stdout and "plot.svg" in stdout
        assert (tmp_path / "results" / "fig3" / "fashion-mnist" / "data.csv").exists()
