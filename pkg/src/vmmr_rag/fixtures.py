"""Synthetic offline suite: label file, knowledge-base texts, query
descriptions and recorded reasoner responses.

The recorded responses come from a simple stand-in reasoner that picks the
candidate whose description shares the most words with the query. Responses
are written under the hash of each exact prompt the pipeline would send, for
every k requested, so the suite replays with the fixture backends.

Usage: ``python -m vmmr_rag.fixtures OUT_DIR [--seed N]``
"""

from __future__ import annotations

import argparse
import json
import random
import re
from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .baseline import PairedEmbeddingSet, default_label_prompt
from .domain import (
    Description,
    LabelSet,
    QueryInput,
    VehicleLabel,
    canonicalize_label,
    reference_label_set,
)
from .embed import EmbeddingBackendConfig, l2_normalize
from .fsutil import atomic_write_text
from .kb import KnowledgeBase, kb_build_index
from .modelclients import (
    NO_CONTEXT_SENTINEL,
    ChatBackendConfig,
    FixtureChatClient,
    prompt_hash,
)
from .pipeline import PipelineConfig, Recognizer

FIXED_TIME = datetime(2025, 1, 1, tzinfo=timezone.utc)
SUITE_DIM = 64
QUERIES_PER_LABEL = 10

FEATURES: dict[str, list[str]] = {
    "ferrari/purosangue": [
        "slim horizontal daytime running light strips above recessed headlight clusters",
        "wide low grille with fine honeycomb mesh",
        "sculpted bonnet with twin vents near the windscreen",
        "tall crossover stance with pronounced wheel arches",
        "small prancing horse badge on the bonnet edge",
        "deep side air intakes framing the bumper",
    ],
    "kia/ev9": [
        "vertical stacked cube lamps beside a closed panel",
        "blanked tiger face panel with digital pattern lighting",
        "boxy upright front with flat bonnet",
        "star map daytime signature running down the corners",
        "angular lower bumper with geometric cladding",
        "logo centred on the smooth closed panel",
    ],
    "lamborghini/revuelto": [
        "y shaped light signatures framing the headlamps",
        "hexagonal air intakes with carbon splitter",
        "very low wedge nose with sharp creases",
        "narrow slit headlamps swept back into the fenders",
        "shield badge centred on the short bonnet",
        "aggressive aero blades in the lower bumper",
    ],
    "mazda/ez6": [
        "thin horizontal headlights joined by an illuminated bar",
        "simple horizontally extended grille outline in body colour",
        "smooth hood lines without distinct creases",
        "wing shaped signature below the lamps",
        "low sedan nose with tidy bumper",
        "winged emblem floating on the closed grille",
    ],
    "mitsubishi/xforce": [
        "dynamic shield front with chrome side bars",
        "t shaped daytime lamps stacked above fog units",
        "compact suv stance with raised skid plate",
        "three diamond badge on a dark horizontal grille",
        "chunky bumper corners with vertical reflectors",
        "prominent silver lower guard",
    ],
    "nissan/ariya": [
        "shielded kumiko pattern panel under glass",
        "quad projector headlamps in a thin strip",
        "v motion chrome boomerang framing the panel",
        "illuminated emblem at the centre of the shield",
        "sleek crossover nose with smooth bonnet",
        "slim air curtains at the bumper corners",
    ],
    "rolls-royce/spectre": [
        "split headlights with slim upper daytime lamps",
        "widest illuminated pantheon grille with vertical vanes",
        "long flat bonnet with spirit of ecstasy mascot",
        "horizontal narrow headlights above a smooth bumper",
        "chrome trim surrounding the upright grille",
        "coupe proportions with a tall formal nose",
    ],
    "toyota/supra-grmn": [
        "double bubble bonnet with wide central intake",
        "triple projector headlamps in teardrop housings",
        "large carbon canards on the front bumper corners",
        "low aggressive splitter with red accents",
        "gr badge on a black mesh grille",
        "sports coupe nose with pronounced fender bulges",
    ],
    "volkswagen/id.buzz": [
        "large v shaped front panel in contrasting colour",
        "rounded headlights linked by a light strip",
        "tall flat van face with short overhang",
        "oversized circular badge in the middle of the v",
        "two tone paint splitting the front",
        "wide lower air intake with honeycomb",
    ],
    "volvo/ex30": [
        "pixel style thor hammer daytime lights",
        "closed blanked front with embossed iron mark",
        "compact rounded suv nose",
        "diagonal bar logo centred on a smooth panel",
        "small lower intake with body colour surround",
        "clean bumper with discreet sensors",
    ],
}

GENERIC: list[str] = [
    "horizontal and narrow headlights",
    "a simple horizontally extended grille outline",
    "smooth hood lines without distinct creases",
    "modern led lighting",
    "clean and balanced front fascia",
    "sleek aerodynamic profile",
    "body coloured bumper",
    "premium looking front design",
]

NEW_LABEL = ("Hyundai", "Ioniq 9")
NEW_LABEL_TEXT = (
    "parametric pixel lamps arranged in a full width band, "
    "seamless horizon panel with square pixel graphics, "
    "upright three row suv front with clamshell bonnet"
)


def _sentence(phrases: Sequence[str]) -> str:
    return "The front shows " + ", ".join(phrases) + "."


def kb_text(canonical_id: str) -> str:
    return _sentence(FEATURES[canonical_id])


def query_text(canonical_id: str, rng: random.Random) -> str:
    own = FEATURES[canonical_id]
    keep = rng.sample(own, rng.randint(1, 4))
    others = [cid for cid in FEATURES if cid != canonical_id]
    borrowed = rng.sample(FEATURES[rng.choice(others)], rng.randint(0, 2))
    generic = rng.sample(GENERIC, rng.randint(1, 3))
    phrases = keep + borrowed + generic
    rng.shuffle(phrases)
    return _sentence(phrases)


_CANDIDATE = re.compile(r"^\[(\d+)\] (.+?)(?:: (.*))?$")
_WORD = re.compile(r"[a-z0-9]+")


def _words(text: str) -> set[str]:
    return set(_WORD.findall(text.lower()))


def simulated_reasoner(prompt: str) -> str:
    """Stand-in LM used to record responses for the default reasoner template."""
    query = prompt.split("Query description:\n", 1)[-1].split("\n\nReference entries:", 1)[0]
    section = prompt.split("Reference entries:\n", 1)[-1].split("\n\n", 1)[0]
    if section.strip() == NO_CONTEXT_SENTINEL:
        return "No reference entries were given, so I cannot decide.\nANSWER: unknown\n"
    qwords = _words(query)
    best, best_score = None, -1.0
    for line in section.splitlines():
        m = _CANDIDATE.match(line)
        if not m:
            continue
        cwords = _words(m.group(3) or m.group(2))
        score = len(qwords & cwords) / max(1, len(qwords | cwords))
        if score > best_score:
            best, best_score = m.group(2), score
    if best is None:
        return "ANSWER: unknown\n"
    style = int(prompt_hash(prompt), 16) % 10
    if style == 0:
        model = best.split()[-1]
        return f"The description points most closely to the {model}.\n"
    return (
        "Comparing headlights, grille, bumper and bonnet against each entry, "
        f"the closest match is {best}.\nANSWER: {best}\n"
    )


class RecordingReasoner:
    """Reasoner client that answers with the simulator and records every response."""

    def __init__(self, responses_dir: Path):
        self.responses_dir = responses_dir
        self.reason_calls = 0

    def complete(self, prompt: str) -> str:
        self.reason_calls += 1
        text = simulated_reasoner(prompt)
        atomic_write_text(self.responses_dir / f"{prompt_hash(prompt)}.txt", text)
        return text


def description_file_name(label: VehicleLabel) -> str:
    return label.canonical_id.replace("/", "__") + ".txt"


def suite_config(root: Path) -> dict:
    return {
        "embed_backend": {"kind": "mock", "dim": SUITE_DIM},
        "describer": {"kind": "fixture", "fixture_dir": "fixtures"},
        "reasoner": {"kind": "fixture", "fixture_dir": "fixtures"},
        "kb_path": "work/suite.kb.jsonl",
        "index_path": "work/suite.idx",
        "fixtures_dir": "fixtures",
        "default_k": 5,
        "determinism_mode": True,
        "report_dir": "reports",
    }


def write_suite(
    root: str | Path,
    *,
    seed: int = 7,
    k_values: Sequence[int] = (1, 3, 5, 7),
    include_new_label: bool = True,
) -> dict[str, Path]:
    """Write the offline suite under ``root`` and return its main paths."""
    root = Path(root)
    labels = reference_label_set()
    rng = random.Random(seed)
    paths = {
        "labels": root / "labels.tsv",
        "descriptions": root / "kb_descriptions",
        "fixtures": root / "fixtures",
        "queries": root / "queries.jsonl",
        "truths": root / "truths.tsv",
        "config": root / "vmmr.json",
        "pairs": root / "baseline" / "pairs.txt",
        "pair_truths": root / "baseline" / "truths.tsv",
    }
    atomic_write_text(
        paths["labels"],
        "# make\tmodel\n" + "".join(f"{l.make}\t{l.model}\n" for l in labels),
    )
    for label in labels:
        atomic_write_text(paths["descriptions"] / description_file_name(label), kb_text(label.canonical_id) + "\n")
    new_label = canonicalize_label(*NEW_LABEL)
    if include_new_label:
        atomic_write_text(root / "new_label" / "labels.tsv", f"{new_label.make}\t{new_label.model}\n")
        atomic_write_text(root / "new_label" / description_file_name(new_label), NEW_LABEL_TEXT + "\n")

    queries: list[QueryInput] = []
    for label in labels:
        for j in range(1, QUERIES_PER_LABEL + 1):
            qid = f"{label.canonical_id.split('/')[1].replace('.', '')}-{j:02d}"
            atomic_write_text(paths["fixtures"] / "descriptions" / f"{qid}.txt", query_text(label.canonical_id, rng))
            queries.append(QueryInput(qid, image=f"images/{qid}.jpg", true_label=label))
    atomic_write_text(
        paths["queries"],
        "".join(
            json.dumps({"id": q.id, "image": q.image, "make": q.true_label.make, "model": q.true_label.model}) + "\n"
            for q in queries
        ),
    )
    atomic_write_text(
        paths["truths"],
        "".join(f"{q.id}\t{q.true_label.make}\t{q.true_label.model}\n" for q in queries),
    )
    atomic_write_text(paths["config"], json.dumps(suite_config(root), indent=2) + "\n")

    # Noisy image vectors around random label vectors, for the baseline command.
    pairs, pair_truths = synthetic_paired_embeddings(labels, QUERIES_PER_LABEL, 32, noise=0.35, seed=seed)
    pairs.save(paths["pairs"])
    atomic_write_text(
        paths["pair_truths"],
        "".join(f"{qid}\t{t.make}\t{t.model}\n" for qid, t in pair_truths.items()),
    )

    record_responses(root, queries, k_values, labels)
    return paths


def build_suite_kb(root: Path, labels: LabelSet, *, with_new_label: bool = False) -> KnowledgeBase:
    kb = KnowledgeBase()
    for label in labels:
        text = (root / "kb_descriptions" / description_file_name(label)).read_text(encoding="utf-8")
        kb.ingest(label, Description(text.strip(), "fixture"), created_at=FIXED_TIME)
    if with_new_label:
        new_label = canonicalize_label(*NEW_LABEL)
        text = (root / "new_label" / description_file_name(new_label)).read_text(encoding="utf-8")
        kb.ingest(new_label, Description(text.strip(), "fixture"), created_at=FIXED_TIME)
    return kb


def record_responses(
    root: Path,
    queries: Sequence[QueryInput],
    k_values: Sequence[int],
    labels: LabelSet,
) -> None:
    fixtures = root / "fixtures"
    embed = EmbeddingBackendConfig(kind="mock", dim=SUITE_DIM)
    chat = ChatBackendConfig(kind="fixture", fixture_dir=str(fixtures))
    config = PipelineConfig(describer=chat, reasoner=chat, embed_backend=embed, determinism_mode=True)
    recorder = RecordingReasoner(fixtures / "responses")
    for with_new in (False, True):
        kb = build_suite_kb(root, labels, with_new_label=with_new)
        index = kb_build_index(kb, embed)
        rec = Recognizer(config, kb, index, describer=FixtureChatClient(chat), reasoner=recorder)
        prepared = rec.prepare_batch(queries)
        for k in sorted(set(k_values) | {config.k}):
            rec.finish_batch(prepared, k)


def synthetic_paired_embeddings(
    labels: LabelSet,
    images_per_label: int,
    dim: int,
    *,
    noise: float,
    seed: int = 0,
) -> tuple[PairedEmbeddingSet, dict[str, VehicleLabel]]:
    """Random unit label vectors; each image is its label's vector plus Gaussian noise."""
    rng = np.random.default_rng(seed)
    pairs = PairedEmbeddingSet(dim)
    truths: dict[str, VehicleLabel] = {}
    label_vecs = {}
    for label in labels:
        vec = l2_normalize(rng.standard_normal(dim))
        label_vecs[label.canonical_id] = vec
        pairs.add_label(label, vec, default_label_prompt(label))
    for label in labels:
        for j in range(images_per_label):
            qid = f"{label.canonical_id}@{j}"
            vec = label_vecs[label.canonical_id] + noise * rng.standard_normal(dim)
            pairs.add_image(qid, l2_normalize(vec))
            truths[qid] = label
    return pairs, truths


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m vmmr_rag.fixtures", description=__doc__.splitlines()[0])
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--k-values", default="1,3,5,7")
    args = parser.parse_args(argv)
    ks = [int(x) for x in args.k_values.split(",") if x.strip()]
    paths = write_suite(args.out_dir, seed=args.seed, k_values=ks)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
