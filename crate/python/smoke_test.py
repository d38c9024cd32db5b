"""Smoke test for the ganpo_py extension module.

Build and run from the repository root:

    cargo build --release -p ganpo-py --features extension-module
    python3 python/smoke_test.py

The script looks for the compiled library under target/release (or the
directory in GANPO_PY_LIB) when the module is not already importable.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import ganpo_py  # noqa: F401

        return sys.modules["ganpo_py"]
    except ImportError:
        pass
    lib_dir = Path(os.environ.get("GANPO_PY_LIB", ROOT / "target" / "release"))
    for name in ("libganpo_py.so", "libganpo_py.dylib", "ganpo_py.dll"):
        path = lib_dir / name
        if path.exists():
            loader = importlib.machinery.ExtensionFileLoader("ganpo_py", str(path))
            spec = importlib.util.spec_from_file_location("ganpo_py", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit(f"ganpo_py not importable and no compiled library in {lib_dir}")


def main():
    g = load_module()

    assert "objective" in g.default_config()
    assert g.oracle_reward("sorted-run", "abcd") == 1.0
    assert g.pearson([1.0, 2.0, 3.0], [2.0, 4.0, 6.5]) > 0.99
    assert g.pearson([1.0, 1.0], [0.0, 1.0]) is None

    checks = g.verify_divergence(support=3, trials=5, seed=1)
    assert checks and all(c["passed"] for c in checks), checks

    small = dict(
        lm_d_model=16, lm_layers=1, lm_heads=2, lm_max_seq_len=24,
        disc_hidden=8, disc_layers=1, disc_heads=2, batch_size=4, epochs=1, eta=0.01,
    )
    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "corpus.jsonl"
        stats = g.gen_data(str(data), n_records=12, max_response_len=6, **small)
        assert stats["records"] == 12, stats

        summary = g.train(str(data), str(Path(tmp) / "run"), objective="ganpo-dpo", **small)
        assert summary["steps"] == 3, summary
        metrics = g.read_metrics(summary["metrics_path"])
        assert len(metrics) == 3 and all(math.isfinite(m["l_adv"]) for m in metrics)
        curve = g.margin_curve(summary["metrics_path"])
        assert len(curve["margins"]) == 3

        result = g.sweep(summary["final_checkpoint"], n_prompts=8, temperatures=[0.0, 1.0])
        assert [p["temperature"] for p in result["points"]] == [0.0, 1.0]
        assert all(0.0 <= p["win_rate"] <= 1.0 for p in result["points"])

        try:
            g.train(str(data), str(Path(tmp) / "bad"), not_a_field=1)
        except ValueError:
            pass
        else:
            raise AssertionError("unknown config field accepted")

    print("python smoke test passed")


if __name__ == "__main__":
    main()
