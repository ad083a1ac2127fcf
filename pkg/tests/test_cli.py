import numpy as np
import pytest
from PIL import Image

from edgedr.cli import EXIT_FORMAT, EXIT_IO, EXIT_OK, EXIT_VALIDATION, main
from edgedr.model_io import load_model

TINY = "4x3,4x3,4x3,4x3,4x3,4x3"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def tiny_model(tmp_path, capsys):
    path = tmp_path / "tiny.edrm"
    code = main(["--output", str(path), "build", "customdnn", "--filters", TINY])
    capsys.readouterr()
    assert code == EXIT_OK
    return path


@pytest.fixture
def image_file(tmp_path):
    rng = np.random.default_rng(8)
    path = tmp_path / "eye.png"
    Image.fromarray(rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)).save(path)
    return path


@pytest.fixture
def calib_dir(tmp_path):
    rng = np.random.default_rng(9)
    d = tmp_path / "calib"
    d.mkdir()
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (48, 48, 3), dtype=np.uint8)).save(
            d / f"c{i}.png"
        )
    return d


@pytest.fixture
def dataset_dir(tmp_path):
    rng = np.random.default_rng(10)
    root = tmp_path / "data"
    for name in ("NoDR", "Mild"):
        (root / name).mkdir(parents=True)
        Image.fromarray(rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)).save(
            root / name / "a.png"
        )
    return root


class TestBuild:
    def test_writes_loadable_model(self, tiny_model):
        g = load_model(tiny_model)
        assert g.precision == "f32"

    def test_same_seed_byte_identical(self, tmp_path, capsys):
        paths = [tmp_path / "a.edrm", tmp_path / "b.edrm"]
        for p in paths:
            assert main(["--seed", "5", "--output", str(p), "build", "customdnn", "--filters", TINY]) == EXIT_OK
        capsys.readouterr()
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_shufflenet_bad_groups_is_validation_error(self, tmp_path, capsys):
        code, _, err = run(
            capsys, "--output", str(tmp_path / "s.edrm"), "build", "shufflenet", "--groups", "5"
        )
        assert code == EXIT_VALIDATION
        assert "divisible" in err

    def test_unknown_arch_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["build", "resnet"])
        assert e.value.code == 2

    def test_weight_sidecar_import(self, tmp_path, capsys):
        from edgedr.builders import build_custom_dnn, export_weight_sidecar

        donor = build_custom_dnn(filters=tuple((4, (3, 3)) for _ in range(6)), seed=77)
        manifest = export_weight_sidecar(donor, tmp_path / "w")
        out = tmp_path / "imported.edrm"
        code, _, _ = run(
            capsys, "--output", str(out), "build", "customdnn",
            "--filters", TINY, "--weights", str(manifest),
        )
        assert code == EXIT_OK
        loaded = load_model(out)
        assert np.array_equal(loaded.weights["n0.w"].data, donor.weights["n0.w"].data)


class TestQuantize:
    def test_writes_smaller_model(self, tiny_model, calib_dir, tmp_path, capsys):
        out = tmp_path / "tiny-int8.edrm"
        code, stdout, _ = run(
            capsys, "--output", str(out), "quantize", str(tiny_model),
            "--calibration", str(calib_dir),
        )
        assert code == EXIT_OK
        assert load_model(out).precision == "i8"
        assert out.stat().st_size < tiny_model.stat().st_size
        assert "agreement" in stdout

    def test_already_quantized_rejected(self, tiny_model, calib_dir, tmp_path, capsys):
        out = tmp_path / "q.edrm"
        run(capsys, "--output", str(out), "quantize", str(tiny_model), "--calibration", str(calib_dir))
        code, _, err = run(
            capsys, "--output", str(tmp_path / "qq.edrm"),
            "quantize", str(out), "--calibration", str(calib_dir),
        )
        assert code == EXIT_VALIDATION
        assert "already quantized" in err

    def test_empty_calibration_dir(self, tiny_model, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run(
            capsys, "quantize", str(tiny_model), "--calibration", str(empty)
        )
        assert code == EXIT_VALIDATION
        assert "no images" in err


class TestInfer:
    def test_prints_probabilities_and_label(self, tiny_model, image_file, capsys):
        code, out, _ = run(capsys, "infer", str(tiny_model), str(image_file))
        assert code == EXIT_OK
        assert "predicted:" in out
        for name in ("NoDR", "Mild", "Moderate", "Severe", "Proliferative"):
            assert name in out

    def test_machine_output_deterministic(self, tiny_model, image_file, capsys):
        a = run(capsys, "--machine", "infer", str(tiny_model), str(image_file))
        b = run(capsys, "--machine", "infer", str(tiny_model), str(image_file))
        assert a == b
        probs = [float(l.split()[1]) for l in a[1].splitlines() if l.startswith("prob_")]
        assert abs(sum(probs) - 1.0) < 1e-6

    def test_missing_model_is_io_error(self, image_file, capsys):
        code, _, err = run(capsys, "infer", "missing.edrm", str(image_file))
        assert code == EXIT_IO

    def test_corrupt_model_is_format_error(self, tmp_path, image_file, capsys):
        bad = tmp_path / "bad.edrm"
        bad.write_bytes(b"XXXX not a model")
        code, _, err = run(capsys, "infer", str(bad), str(image_file))
        assert code == EXIT_FORMAT


class TestEvaluate:
    def test_single_image_confusion(self, tiny_model, tmp_path, capsys):
        root = tmp_path / "one"
        (root / "Severe").mkdir(parents=True)
        Image.fromarray(np.full((32, 32, 3), 80, np.uint8)).save(root / "Severe" / "x.png")
        code, out, _ = run(capsys, "--machine", "evaluate", str(tiny_model), str(root))
        assert code == EXIT_OK
        rows = [l for l in out.splitlines() if l and l[0].isdigit()]
        assert sum(int(v) for row in rows for v in row.split()) == 1

    def test_report_file_written(self, tiny_model, dataset_dir, tmp_path, capsys):
        report = tmp_path / "report.txt"
        code, out, _ = run(
            capsys, "--output", str(report), "evaluate", str(tiny_model), str(dataset_dir)
        )
        assert code == EXIT_OK
        assert report.exists()
        assert "accuracy" in report.read_text()
        assert "accuracy" in out


class TestProfile:
    def test_five_rows_in_fixed_order(self, tiny_model, capsys):
        code, out, _ = run(capsys, "profile", str(tiny_model))
        assert code == EXIT_OK
        lines = out.splitlines()
        order = [l.split()[0] for l in lines if l.startswith(("low-end", "high-end", "AI", "CPU", "GPU"))]
        assert order == ["low-end", "high-end", "AI", "CPU", "GPU"]

    def test_machine_output_has_plan_fields(self, tiny_model, capsys):
        code, out, _ = run(capsys, "--machine", "profile", str(tiny_model))
        assert code == EXIT_OK
        keys = {l.split()[0] for l in out.splitlines()}
        assert {"macs", "arena_ram_bytes", "rom_bytes", "latency_ms"} <= keys
        latencies = [float(l.split("\t")[2]) for l in out.splitlines() if l.startswith("latency_ms")]
        assert latencies == sorted(latencies, reverse=True)

    def test_custom_profile_file(self, tiny_model, tmp_path, capsys):
        pf = tmp_path / "own.profile"
        pf.write_text("myboard\t1000.0\t2.0\n")
        code, out, _ = run(capsys, "profile", str(tiny_model), "--profiles", str(pf))
        assert code == EXIT_OK
        assert "myboard" in out
