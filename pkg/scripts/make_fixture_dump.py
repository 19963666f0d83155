#!/usr/bin/env python3
"""Generate a small NVD-fixture dump (schemas/nvd_fixture.schema.json) so the
`msivd ingest` command can be exercised by hand:

    python scripts/make_fixture_dump.py --out dump.json
    msivd ingest --nvd-dump dump.json --out samples.jsonl
"""
import argparse
import json
import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from msivd.synth import safe_code, vulnerable_code

CWES = ["CWE-787", "CWE-125", "CWE-89", "CWE-770", "CWE-415", "CWE-190"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="dump.json")
    parser.add_argument("--n-records", type=int, default=12)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    records = []
    for i in range(args.n_records):
        pre, vs, ve, _fix = vulnerable_code(rng, i)
        post = safe_code(rng, i)
        # one record in six lands after the 2023-01-01 cutoff, so the default
        # 80/10/10 split is feasible on the resulting samples
        year = 2023 if i % 6 == 5 else 2022
        records.append(
            {
                "cve_id": f"CVE-{year}-{10000 + i}",
                "cwe_id": rng.choice(CWES),
                "description": "Attacker-controlled length reaches an unchecked copy.",
                "exploitability_score": round(rng.uniform(1.0, 9.5), 1),
                "severity": rng.choice(["low", "medium", "high", "critical"]),
                "attack_complexity": rng.choice(["low", "high"]),
                "fix_commit_date": f"{year}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}",
                "references": [
                    {
                        "url": f"https://github.com/example/proj/commit/{i:040x}",
                        "tags": ["Patch"],
                    }
                ],
                "patches": [
                    {
                        "path": f"src/module_{i}.c",
                        "pre_code": pre,
                        "post_code": post,
                        "changed_ranges": [[vs, ve]],
                    }
                ],
            }
        )
    Path(args.out).write_text(json.dumps({"records": records}, indent=2), encoding="utf-8")
    print(f"wrote {len(records)} records to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
