#!/usr/bin/env python3
"""Regenerate the bundled hermetic mini corpus.

50 documents in 10 topic groups of 5. Documents in a group share their three
leading topic words (so a short query built from them spreads BM25 mass over
the group instead of spiking on one document), share subtopic words with two
or three groupmates, and end with words unique to the document. 20 queries
(2 per topic) carry one positive qrel each.

Run from the repo root:  python scripts/make_mini_corpus.py
"""

from __future__ import annotations

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src" / "qgen" / "data" / "mini"

TOPICS = [
    ("coral reef bleaching", ["ocean", "warming", "symbiotic", "algae", "polyps", "acidification"]),
    ("solar panel efficiency", ["photovoltaic", "silicon", "inverter", "rooftop", "irradiance", "degradation"]),
    ("honeybee colony collapse", ["pollinator", "hive", "pesticide", "forager", "brood", "neonicotinoid"]),
    ("glacier melt acceleration", ["ice", "albedo", "runoff", "moraine", "calving", "firn"]),
    ("urban traffic congestion", ["commuter", "transit", "junction", "toll", "corridor", "gridlock"]),
    ("gut microbiome diversity", ["bacteria", "fermentation", "fiber", "probiotic", "intestinal", "mucosa"]),
    ("wildfire smoke exposure", ["particulate", "plume", "respiratory", "evacuation", "combustion", "haze"]),
    ("quantum error correction", ["qubit", "decoherence", "stabilizer", "syndrome", "redundancy", "parity"]),
    ("ancient pottery analysis", ["ceramic", "shard", "kiln", "residue", "glaze", "excavation"]),
    ("sleep deprivation memory", ["circadian", "cortisol", "consolidation", "hippocampus", "recall", "alertness"]),
]

UNIQUE_POOL = [
    "gradient", "threshold", "margin", "survey", "cohort", "sensor", "archive", "profile",
    "sampling", "variance", "baseline", "plateau", "cluster", "spectrum", "lattice", "mosaic",
    "relay", "cascade", "drift", "pulse", "vector", "horizon", "basin", "stratum", "filament",
    "crest", "ledger", "prism", "conduit", "tracer", "niche", "flux", "quorum", "tessera",
    "pivot", "ridge", "axiom", "tangent", "kernel", "module", "octave", "quartile", "residue2",
    "sentinel", "painting", "helix", "isotope", "matrix", "nucleus", "oracle",
]

CONNECTORS = [
    "studies of",
    "field measurements show that",
    "long term records indicate that",
    "a recent survey finds that",
    "laboratory work suggests that",
]

QUERY_SHAPES = [
    "how does {sub0} influence {head}",
    "what role does {sub0} play in {head}",
    "evidence linking {sub0} and {sub1} to {head}",
    "why {head} depends on {sub0}",
]


def main() -> None:
    rng = random.Random(20240611)
    unique_iter = iter(UNIQUE_POOL)
    docs = []
    queries = []
    qrels = []
    qnum = 0
    for g, (head, subs) in enumerate(TOPICS):
        for j in range(5):
            doc_num = g * 5 + j + 1
            doc_id = f"mini-{doc_num:03d}"
            # two subtopic words shared inside the group, rotated per doc
            shared = [subs[(j + k) % 5] for k in range(3)]
            uniq = next(unique_iter)
            connector = CONNECTORS[(g + j) % len(CONNECTORS)]
            text = (
                f"{head.capitalize()} {connector} {shared[0]} and {shared[1]} "
                f"shape the {shared[2]} response, with the {uniq} record "
                f"offering further context for {head.split()[0]} work."
            )
            title = f"{head.title()} note {j + 1}" if g < 3 else ""
            docs.append({"_id": doc_id, "title": title, "text": text})
        # two queries per topic, targeting docs j=0 and j=2
        for j in (0, 2):
            qnum += 1
            qid = f"mini-q{qnum:02d}"
            doc_num = g * 5 + j + 1
            shape = QUERY_SHAPES[(g + j) % len(QUERY_SHAPES)]
            shared = [subs[(j + k) % 5] for k in range(3)]
            text = shape.format(head=head, sub0=shared[0], sub1=shared[1])
            queries.append({"_id": qid, "text": text})
            qrels.append((qid, f"mini-{doc_num:03d}", 1))

    OUT.mkdir(parents=True, exist_ok=True)
    with open(OUT / "corpus.jsonl", "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    with open(OUT / "queries.jsonl", "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps(q, ensure_ascii=False) + "\n")
    with open(OUT / "qrels.tsv", "w", encoding="utf-8") as fh:
        fh.write("query-id\tcorpus-id\tscore\n")
        for qid, doc_id, grade in qrels:
            fh.write(f"{qid}\t{doc_id}\t{grade}\n")
    print(f"wrote {len(docs)} docs, {len(queries)} queries, {len(qrels)} qrels -> {OUT}")


if __name__ == "__main__":
    main()
