#!/usr/bin/env python3
"""Smoke test for the ehrtext_py extension module.

Builds nothing itself: expects `cargo build -p ehrtext-py` (or --release) to
have produced the cdylib. Copies it next to a temp directory under the
importable name and drives a small end-to-end pipeline.
"""

import shutil
import sys
import tempfile
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def locate_cdylib() -> Path:
    candidates = [
        REPO_ROOT / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libehrtext_py.so", "libehrtext_py.dylib", "ehrtext_py.dll")
    ]
    for path in candidates:
        if path.is_file():
            return path
    sys.exit(
        "ehrtext_py cdylib not found; run `cargo build -p ehrtext-py` first "
        f"(searched {len(candidates)} paths under {REPO_ROOT / 'target'})"
    )


def import_module(tmp: Path):
    src = locate_cdylib()
    suffix = ".pyd" if src.suffix == ".dll" else ".so"
    dst = tmp / f"ehrtext_py{suffix}"
    shutil.copyfile(src, dst)
    sys.path.insert(0, str(tmp))
    import ehrtext_py  # noqa: E402

    return ehrtext_py


def check(condition: bool, message: str) -> None:
    if not condition:
        sys.exit(f"FAIL: {message}")
    print(f"ok: {message}")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp_str:
        tmp = Path(tmp_str)
        m = import_module(tmp)

        data_dir = tmp / "data"
        ledger = m.generate_synth(
            str(data_dir), seed=11, n_patients=60, signal_strength=0.8,
            short_stay_fraction=0.1,
        )
        check(ledger["n_patients"] == 60, "synth generated 60 patients")
        check(ledger["rows_patients"] == 60, "patients table has 60 rows")

        cohort = m.load_cohort(str(data_dir))
        n = len(cohort)
        check(n == int(ledger["planted_cohort_size"]), f"cohort size {n} matches ledger")

        stay_ids = cohort.stay_ids()
        doc = cohort.document(stay_ids[0])
        check(doc.startswith("The patient "), "document starts with the DEMO template")
        check("was diagnosed with" in doc, "document carries the COND section")
        check("{" not in doc and "}" not in doc, "document has no unexpanded placeholders")

        cond_only = cohort.document(stay_ids[0], sections=["COND"])
        check(cond_only.startswith("was diagnosed with"), "ablation to COND works")

        dim1 = cohort.feature_dim("rep1")
        dim2 = cohort.feature_dim("rep2")
        v2 = cohort.features(stay_ids[0], "rep2")
        check(len(v2) == dim2, "rep2 vector length matches the layout")
        # dim1 = demo + cond + w * D and dim2 = demo + cond + D
        w = 24  # 48 h window / 2 h bins
        dynamic = (dim1 - dim2) // (w - 1)
        check(dim1 == dim2 + (w - 1) * dynamic, "rep1/rep2 dimension equation holds")

        rows, labels = cohort.matrix("rep2")
        check(len(rows) == n and len(labels) == n, "matrix shape matches the cohort")

        model = m.train_logreg(rows, labels, l2_lambda=0.01)
        scores = model.predict_proba(rows)
        auc = m.auroc(scores, labels)
        check(auc > 0.8, f"planted signal is separable (training auroc {auc:.3f})")
        check(abs(m.auroc([0.9, 0.1], [1, 0]) - 1.0) < 1e-12, "perfect ranking gives auroc 1.0")
        check(abs(m.auprc([0.5, 0.5, 0.5, 0.5], [1, 0, 0, 0]) - 0.25) < 1e-12,
              "tied scores give auprc = prevalence")

        prompt = m.build_prompt("p1", doc, budget=1024)
        check(prompt.startswith("You are an extremely helpful healthcare assistant."),
              "P1 scaffold intact")
        check(m.count_tokens(prompt) <= 1024, "prompt respects the token budget")
        check(m.parse_answer(" No.") == "no", "answer parsing normalizes punctuation")
        check(m.resolve_prediction("yes", "p1") == (1, False), "(yes, p1) resolves to 1")
        check(m.resolve_prediction("yes", "p2") == (0, False), "(yes, p2) resolves to 0")
        check(m.resolve_prediction("unanswered", "p1") == (0, True),
              "unanswered defaults to 'No' under p1")
        check(m.format_value(73.655) == "73.655", "value formatting matches the template style")

    print("smoke test passed")


if __name__ == "__main__":
    main()
