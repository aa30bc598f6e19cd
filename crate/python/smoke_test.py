"""Smoke test for the semanon_py extension.

Build first with `maturin develop -m crates/py/Cargo.toml` or
`cargo build --release -p semanon-py`; in the latter case the shared library
is loaded straight from target/release.
"""

import importlib.machinery
import importlib.util
import json
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent

COMPACT = {
    "schema_version": 1,
    "generator": {
        "latent": {
            "slots": {"identity": 16, "expression": 16, "pose": 16, "age": 16, "free": 32},
            "local_dim": 16,
        },
        "grid_size": 8,
        "fourier_dim": 32,
        "feature_channels": 24,
        "render_channels": [16, 12],
    },
    "inversion": {"steps": 20},
    "model": {"w_mean_samples": 64},
}


def load_module():
    try:
        import semanon_py

        return semanon_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsemanon_py.so"
        if lib.exists():
            loader = importlib.machinery.ExtensionFileLoader("semanon_py", str(lib))
            spec = importlib.util.spec_from_file_location("semanon_py", lib, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("semanon_py is not built")


def main():
    sp = load_module()

    config = sp.Config(json.dumps(COMPACT))
    assert config.resolution == 32
    try:
        sp.Config('{"schema_version": 1, "typo": 0}')
        raise AssertionError("unknown key accepted")
    except ValueError:
        pass

    model = sp.Model.initial(config)
    assert len(model.components) == 13
    with tempfile.TemporaryDirectory() as tmp:
        path = pathlib.Path(tmp) / "model.bin"
        model.save(str(path))
        assert sp.Model.load(str(path)).to_bytes() == path.read_bytes()

    image, labels = model.sample(7)
    other, other_labels = model.sample(8)
    assert (image.height, image.width) == (32, 32)

    anonymizer = sp.Anonymizer(model, config)
    mouth = model.components.index("mouth")
    out, report = anonymizer.anonymize(image, labels, mode="clinical", preserve=["mouth"], seed=1)
    report = json.loads(report)
    assert report["preserved_components"] == ["mouth"]
    region = labels.mask_of([mouth])
    if any(region):
        l1, psnr = sp.region_metrics(image, out, region)
        assert l1 == 0.0 and psnr == 99.0

    a, b, paired = anonymizer.anonymize_pair((image, other), (labels, other_labels), seed=2)
    assert json.loads(paired)["arity"] == "paired"

    assert sp.frechet_distance([0.0], [[1.0]], [1.0], [[1.0]]) == 1.0
    assert sp.mask_iou(1, 2, [True, False], [True, True]) == 0.5
    assert sp.mirrored_loss([[1.0, 0.0], [1.0, 0.0]], 0, 1, 0.5) == 0.0
    band = sp.blend_band(8, 8, [i < 8 for i in range(64)], [False] * 64, sigma=0.0, kernel_size=1)
    assert not any(band)
    print("semanon_py smoke test passed")


if __name__ == "__main__":
    main()
