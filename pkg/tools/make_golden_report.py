"""Regenerate the pinned golden run reports under testdata/.

Run after any intentional change to the cost model, protocol framing, or
report schema, and review the diff before committing.
"""

import pathlib

from imdauth.harness.report import report_json, scenario_report
from imdauth.scenario import run_scenario, scenario_from_text

ROOT = pathlib.Path(__file__).resolve().parent.parent
GOLDENS = {
    "report_happy_dual_factor_seed7.json": ROOT / "scenarios" / "happy_dual_factor.toml",
}


def main() -> None:
    for name, scenario_path in GOLDENS.items():
        result = run_scenario(scenario_from_text(scenario_path.read_text()))
        out = ROOT / "testdata" / name
        out.write_text(report_json(scenario_report(result)))
        print(f"wrote {out} (passed={result.passed})")


if __name__ == "__main__":
    main()
