"""Recompute the 95% Hanley-McNeil half-widths and CIdeR-vs-baseline verdicts
for the published challenge results from their AUCs and class counts.

    python scripts/table3_statistics.py
"""
from cider.evaluation import EvalResult, compare_models, equal_split_counts, render_results_table

# (sub-challenge, test counts, assumed?, {model: AUC}, printed half-widths)
ROWS = [
    ("Track 1", equal_split_counts(234), True, {"CIdeR": 0.799, "MLP": 0.699}, {"CIdeR": 0.058, "MLP": 0.068}),
    ("Track 2", (21, 188), False, {"CIdeR": 0.786, "LR": 0.647, "MLP": 0.684, "RF": 0.776},
     {"CIdeR": 0.057, "LR": 0.014, "MLP": 0.072, "RF": 0.063}),
    ("CCS", (48, 183), False, {"CIdeR": 0.732, "LR": 0.722, "MLP": 0.765, "RF": 0.753},
     {"CIdeR": 0.068, "LR": 0.069, "MLP": 0.065, "RF": 0.066}),
    ("CSS", (94, 183), False, {"CIdeR": 0.787, "LR": 0.583, "MLP": 0.656, "RF": 0.628},
     {"CIdeR": 0.060, "LR": 0.072, "MLP": 0.070, "RF": 0.070}),
]


def main():
    for name, (n_pos, n_neg), assumed, aucs, printed in ROWS:
        results = [EvalResult.from_summary(m, a, n_pos, n_neg, assumed_counts=assumed) for m, a in aucs.items()]
        cider = results[0]
        best = max(results[1:], key=lambda r: r.auc)
        verdict = compare_models(cider, best)
        print(f"== {name}")
        print(render_results_table(results, bold=["CIdeR"] if verdict.significant_at_95 else []))
        print("published half-widths: " + ", ".join(f"{m} ±{w:.3f}" for m, w in printed.items()))
        print(f"CIdeR vs {best.name}: z = {verdict.z:.3f}, significant: {verdict.significant_at_95}\n")


if __name__ == "__main__":
    main()
