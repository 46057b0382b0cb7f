#!/usr/bin/env python3
"""Recompute fixture goldens from the raw inputs without the Rust code.

    python3 oracle.py mapping            > golden/mapping.jsonl
    python3 oracle.py filter OUT_DIR     > golden/filter_counts.json

`filter` needs cohort/cases.jsonl and cohort/splits.json from a pipeline run
(the split is seeded ChaCha and is not recomputed here).
"""
import hashlib
import json
import math
import struct
import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
TAU = 0.85
CANDIDATES = 20


def norm(text):
    return " ".join(w.lower() for w in text.split())


def tsv(path):
    rows = [line.split("\t") for line in path.read_text().splitlines() if line.strip()]
    return rows[0], rows[1:]


def hash_embedding(text, seed, dim):
    out = []
    for j in range(dim):
        d = hashlib.sha256(struct.pack("<Q", seed) + struct.pack("<I", j) + text.encode()).digest()
        word = struct.unpack("<Q", d[:8])[0]
        out.append(float(word) / 18446744073709551616.0 * 2.0 - 1.0)
    return out


def cosine(a, b):
    dot = 0.0
    for x, y in zip(a, b):
        dot += x * y
    na = 0.0
    for x in a:
        na += x * x
    nb = 0.0
    for y in b:
        nb += y * y
    na, nb = math.sqrt(na), math.sqrt(nb)
    if na == 0.0 or nb == 0.0:
        return None
    return min(1.0, max(-1.0, dot / (na * nb)))


def mapping():
    scenario = json.loads((HERE / "scenario.json").read_text())
    overrides = {norm(k): v for k, v in scenario.get("embeddings", {}).items()}

    def embed(text):
        key = norm(text)
        return overrides.get(key) or hash_embedding(key, scenario.get("seed", 0), scenario["embedding_dim"])

    _, nodes = tsv(HERE / "nodes.tsv")
    _, vocab = tsv(HERE / "vocab.tsv")
    node_vecs = [(n[0], embed(n[2])) for n in nodes]

    def verdict(code):
        marker = f"ICD-9 code: {code}\n"
        for rule in scenario["rules"]:
            if rule.get("tag") == "entity_select" and rule.get("contains", marker) in marker:
                return rule
        return None

    for code, desc in vocab:
        rec = {"code": code, "node_id": None, "stage": "rejected", "score": 0.0, "note": ""}
        exact = sorted(n[0] for n in nodes if norm(n[2]) == norm(desc))
        if exact:
            rec.update(node_id=exact[0], stage="exact", score=1.0)
        else:
            q = embed(desc)
            scored = [(c, nid) for nid, v in node_vecs if (c := cosine(q, v)) is not None]
            scored.sort(key=lambda s: (-s[0], s[1]))
            cands = scored[:CANDIDATES]
            top_score, top_id = cands[0]
            rec["score"] = top_score
            if not top_score > TAU:
                rec["note"] = f"no exact match; top cosine {top_score:.5f} not above {TAU}"
            else:
                rule = verdict(code)
                if rule is None:
                    raise SystemExit(f"no validator rule for {code}")
                if "fail" in rule:
                    rec["note"] = f"provider failure: scripted provider failure: {rule['fail']}"
                else:
                    reply = rule["reply"]
                    body = reply[reply.find("{"): reply.rfind("}") + 1] if "{" in reply else ""
                    try:
                        v = json.loads(body)
                    except ValueError:
                        v = None
                    if v is None:
                        rec["note"] = "unparseable validator reply"
                    elif v["verdict"] == "confirm":
                        rec.update(node_id=top_id, stage="llm_validated")
                    elif v["verdict"] == "reject":
                        rec["note"] = f"rejected by validator: {v['reason']}"
                    else:
                        hit = [c for c in cands if c[1] == v["node_id"]]
                        if not hit:
                            rec["note"] = f"out-of-candidate revision: {v['node_id']}"
                        else:
                            rec.update(node_id=hit[0][1], stage="llm_revised", score=hit[0][0],
                                       note=f"revised from {top_id}")
        print(json.dumps(rec, separators=(",", ":"), ensure_ascii=False))


def filter_counts(out_dir):
    scenario = json.loads((HERE / "scenario.json").read_text())
    _, vocab = tsv(HERE / "vocab.tsv")
    desc = dict(vocab)
    splits = json.loads((out_dir / "cohort" / "splits.json").read_text())
    largest = max((k for k in splits if k.startswith("train_")), key=lambda k: int(k[6:]))
    ids = set(splits[largest])
    cases = [json.loads(l) for l in (out_dir / "cohort" / "cases.jsonl").read_text().splitlines() if l]
    rules = [r for r in scenario["rules"] if r.get("tag") == "cot_gen"]
    totals = {"generated": 0, "kept": 0, "dropped_mismatch": 0, "dropped_unparseable": 0, "failed": 0}
    for case in cases:
        if case["case_id"] not in ids:
            continue
        listed = "\n".join(desc[c] for c in case["codes_t"] if c in desc)
        for label in case["labels"].values():
            text = listed + ("\nnext visit: Yes" if label == 1 else "")
            rule = next(r for r in rules if r.get("contains", "") in text)
            totals["generated"] += 1
            last = rule["reply"].strip().splitlines()[-1]
            if not last.startswith("Conclusion: "):
                totals["dropped_unparseable"] += 1
            elif (last == "Conclusion: Yes") == (label == 1):
                totals["kept"] += 1
            else:
                totals["dropped_mismatch"] += 1
    print(json.dumps(totals, indent=2))


if __name__ == "__main__":
    if sys.argv[1:2] == ["mapping"]:
        mapping()
    elif sys.argv[1:2] == ["filter"]:
        filter_counts(Path(sys.argv[2]))
    else:
        raise SystemExit(__doc__)
