"""Hand-built graphs, schemas and plans shared by several test modules."""

from __future__ import annotations

import json
import re
from pathlib import Path

from skbrank.embed import HashEmbedder, build_index
from skbrank.llm import load_pack
from skbrank.rerank import SerializationCaps
from skbrank.skb import SkbEdge, SkbGraph, SkbNode, SkbSchema

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden"

AMAZON_SCHEMA = SkbSchema.from_dict(
    {
        "node_types": ["product", "brand", "category", "color"],
        "relation_types": ["HAS_BRAND", "HAS_CATEGORY", "HAS_COLOR", "ALSO_BUY", "ALSO_VIEW"],
        "endpoint_constraints": {
            "HAS_BRAND": [["product", "brand"]],
            "HAS_CATEGORY": [["product", "category"]],
            "HAS_COLOR": [["product", "color"]],
            "ALSO_BUY": [["product", "product"]],
            "ALSO_VIEW": [["product", "product"]],
        },
        "text_fields": {
            "product": ["name", "details"],
            "brand": ["name"],
            "category": ["name"],
            "color": ["name"],
        },
    }
)

_PRIME_LABELS = [
    "disease", "gene_protein", "molecular_function", "drug", "pathway", "anatomy",
    "effect_phenotype", "biological_process", "cellular_component", "exposure",
]
_PRIME_PAIRS = {
    "PPI": [["gene_protein", "gene_protein"]],
    "CARRIER": [["drug", "gene_protein"]],
    "ENZYME": [["drug", "gene_protein"]],
    "TARGET": [["drug", "gene_protein"]],
    "TRANSPORTER": [["drug", "gene_protein"]],
    "CONTRAINDICATION": [["disease", "drug"]],
    "INDICATION": [["disease", "drug"]],
    "OFF_LABEL_USE": [["disease", "drug"]],
    "SYNERGISTIC_INTERACTION": [["drug", "drug"]],
    "ASSOCIATED_WITH": [["effect_phenotype", "gene_protein"], ["disease", "gene_protein"]],
    "PARENT_CHILD": [[x, x] for x in _PRIME_LABELS],
    "PHENOTYPE_PRESENT": [["disease", "effect_phenotype"]],
    "PHENOTYPE_ABSENT": [["disease", "effect_phenotype"]],
    "SIDE_EFFECT": [["drug", "effect_phenotype"]],
    "INTERACTS_WITH": [
        ["gene_protein", x]
        for x in ("molecular_function", "biological_process", "cellular_component", "pathway", "exposure")
    ],
    "LINKED_TO": [["disease", "exposure"]],
    "EXPRESSION_PRESENT": [["anatomy", "gene_protein"]],
    "EXPRESSION_ABSENT": [["anatomy", "gene_protein"]],
}
PRIME_SCHEMA = SkbSchema.from_dict(
    {
        "node_types": _PRIME_LABELS,
        "relation_types": list(_PRIME_PAIRS),
        "endpoint_constraints": _PRIME_PAIRS,
        "text_fields": {lab: ["name", "details", "source"] for lab in _PRIME_LABELS},
    }
)

# Relation names as the MAG planner emits them.
MAG_PLAN_SCHEMA = SkbSchema.from_dict(
    {
        "node_types": ["author", "paper", "institution", "field_of_study"],
        "relation_types": ["WRITES", "HAS_TOPIC", "CITES", "AFFILIATED_WITH"],
        "endpoint_constraints": {
            "WRITES": [["author", "paper"]],
            "HAS_TOPIC": [["paper", "field_of_study"]],
            "CITES": [["paper", "paper"]],
            "AFFILIATED_WITH": [["author", "institution"]],
        },
        "text_fields": {
            "author": ["name"],
            "paper": ["name", "details"],
            "institution": ["name"],
            "field_of_study": ["name"],
        },
    }
)

# Relation names as stored in the MAG SKB (used for serialization).
MAG_STORE_SCHEMA = SkbSchema.from_dict(
    {
        "node_types": ["author", "paper", "institution", "field_of_study"],
        "relation_types": [
            "author_writes_paper",
            "paper_cites_paper",
            "paper_has_field_of_study",
            "author_affiliated_with_institution",
        ],
        "endpoint_constraints": {
            "author_writes_paper": [["author", "paper"]],
            "paper_cites_paper": [["paper", "paper"]],
            "paper_has_field_of_study": [["paper", "field_of_study"]],
            "author_affiliated_with_institution": [["author", "institution"]],
        },
        "text_fields": {
            "author": ["name"],
            "paper": ["name", "details"],
            "institution": ["name"],
            "field_of_study": ["name"],
        },
    }
)

MAG_PLAN = {
    "anchors": [
        {"var": "A1", "text": "University of Washington", "label": "institution", "match_mode": "name"}
    ],
    "hops": [
        {"from": "A1", "rel": "AFFILIATED_WITH", "to_var": "U", "to_label": "author"},
        {"from": "U", "rel": "WRITES", "to_var": "T", "to_label": "paper"},
    ],
    "target": {"var": "T", "labels": ["paper"], "relevance_text": "retinal imaging with optical coherence tomography"},
    "risk_level": "weak",
}


def sony_graph() -> SkbGraph:
    """Exactly one product is both Sony-branded and about long battery headphones."""
    nodes = [
        SkbNode("b1", "brand", {"name": "Sony"}),
        SkbNode("b2", "brand", {"name": "Bose"}),
        SkbNode("b3", "brand", {"name": "Sonos"}),
        SkbNode("c1", "category", {"name": "headphones"}),
        SkbNode("k1", "color", {"name": "black"}),
        SkbNode("p1", "product", {"name": "Sony WH-1000XM5 wireless headphones", "details": "noise cancelling headphones with 30 hours of battery life"}),
        SkbNode("p2", "product", {"name": "Sony Bravia television", "details": "4k smart tv with hdr"}),
        SkbNode("p3", "product", {"name": "Bose QuietComfort headphones", "details": "headphones with at least 30 hours of battery life"}),
        SkbNode("p4", "product", {"name": "Sony portable speaker", "details": "bluetooth speaker with 12 hours of battery"}),
        SkbNode("p5", "product", {"name": "Sonos Era speaker", "details": "smart speaker"}),
    ]
    edges = [
        SkbEdge("p1", "HAS_BRAND", "b1"),
        SkbEdge("p2", "HAS_BRAND", "b1"),
        SkbEdge("p3", "HAS_BRAND", "b2"),
        SkbEdge("p4", "HAS_BRAND", "b1"),
        SkbEdge("p5", "HAS_BRAND", "b3"),
        SkbEdge("p1", "HAS_CATEGORY", "c1"),
        SkbEdge("p3", "HAS_CATEGORY", "c1"),
        SkbEdge("p1", "HAS_COLOR", "k1"),
        SkbEdge("p1", "ALSO_VIEW", "p3"),
        SkbEdge("p1", "ALSO_BUY", "p4"),
    ]
    return SkbGraph(AMAZON_SCHEMA, nodes, edges)


def build_indices(graph: SkbGraph, embedder=None) -> dict:
    embedder = embedder or HashEmbedder(256)
    out = {}
    for label in sorted(graph.schema.node_types):
        for mode in ("name", "doc"):
            out[(label, mode)] = build_index(graph, embedder, label, mode)
    return out


# -- reference serialization nodes ------------------------------------------

_PRIME_DETAILS = (
    "{'mondo_name': 'Ehlers-Danlos syndrome with periventricular heterotopia', "
    "'mondo_definition': 'Ehlers-Danlos syndrome (EDS) with periventricular heterotopia is a "
    "newly described variant of EDS. Affected patients exhibit features consistent with EDS, "
    "including joint hypermobility, skin fragility and aortic dilatation. They also have "
    "periventricular heterotopia (PH), which is characterized by focal epilepsy usually "
    "beginning in the second decade of life...', 'umls_description': '... Caused by mutations "
    "in the filamin A gene located at locus Xq28...', 'mayo_symptoms': '... Overly flexible "
    "joints... Stretchy skin...'}"
)


def prime_node() -> tuple[SkbGraph, str, SerializationCaps]:
    genes = ["COL1A1", "COL1A2", "COL3A1", "SLC39A13", "B3GALT6"]
    nodes = [
        SkbNode(
            "d:1",
            "disease",
            {"name": "Ehlers-Danlos syndrome with periventricular heterotopia", "details": _PRIME_DETAILS, "source": "MONDO"},
        )
    ]
    # Inserted in reverse so ordering must come from ids, not input order.
    for i, g in reversed(list(enumerate(genes))):
        nodes.append(SkbNode(f"g:{i}", "gene_protein", {"name": g, "source": "NCBI"}))
    edges = [SkbEdge(f"g:{i}", "ASSOCIATED_WITH", "d:1") for i in range(len(genes))]
    return SkbGraph(PRIME_SCHEMA, nodes, edges), "d:1", SerializationCaps(300, 10)


def mag_node() -> tuple[SkbGraph, str, SerializationCaps]:
    nodes = [
        SkbNode(
            "p:0",
            "paper",
            {
                "name": "Multispectral scanning laser ophthalmoscopy combined with optical coherence "
                "tomography for simultaneous in vivo mouse retinal imaging",
                "details": "We demonstrate a multimodal retinal imaging system that combines a scanning "
                "laser ophthalmoscope with a Fourier-domain optical coherence tomography subsystem...",
            },
        ),
        SkbNode("a:1", "author", {"name": "Yifan Jian"}),
        SkbNode("a:2", "author", {"name": "Marinko V. Sarunic"}),
        SkbNode("p:1", "paper", {"name": "In vivo retinal imaging by optical coherence tomography"}),
        SkbNode("p:2", "paper", {"name": "Adaptive optics scanning laser ophthalmoscope"}),
        SkbNode("f:1", "field_of_study", {"name": "Optical coherence tomography"}),
        SkbNode("f:2", "field_of_study", {"name": "Retinal imaging"}),
        SkbNode("f:3", "field_of_study", {"name": "Ophthalmoscope"}),
        SkbNode("f:4", "field_of_study", {"name": "Optical engineering"}),
        SkbNode("i:1", "institution", {"name": "Simon Fraser University"}),
    ]
    edges = [
        SkbEdge("a:2", "author_writes_paper", "p:0"),
        SkbEdge("a:1", "author_writes_paper", "p:0"),
        SkbEdge("p:0", "paper_cites_paper", "p:2"),
        SkbEdge("p:1", "paper_cites_paper", "p:0"),
        SkbEdge("p:0", "paper_has_field_of_study", "f:3"),
        SkbEdge("p:0", "paper_has_field_of_study", "f:1"),
        SkbEdge("p:0", "paper_has_field_of_study", "f:4"),
        SkbEdge("p:0", "paper_has_field_of_study", "f:2"),
        # Second-hop edge: must not show up on the paper's document.
        SkbEdge("a:1", "author_affiliated_with_institution", "i:1"),
    ]
    return SkbGraph(MAG_STORE_SCHEMA, nodes, edges), "p:0", SerializationCaps(512, 10, relation_style="raw")


_AMAZON_DETAILS = (
    "product: Butthead Golf Club Headcovers. brand: Butthead Covers. description: Upside down "
    "animal head covers bring humor to the game of golf. they look like they dove into the golf "
    "bag while riding on the clubs... Double stitching with top quality thread ensures product "
    "strength for a long life... features: Bring more humor to the game of golf, while "
    "protecting your club heads and shaft with the knit sock. | Quality stitching and fade "
    "resistant fabrics make a long lasting cover... reviews: Absolutely Adorable | Too cute! | "
    "Husband loved it | ..."
)


def amazon_node() -> tuple[SkbGraph, str, SerializationCaps]:
    viewed = [
        "Daphne's Moose Headcovers",
        "Daphne's Deer Headcovers",
        "Ted Talking Golf Club Cover",
        "Bass Golf Club Head Cover",
    ]
    nodes = [
        SkbNode("P0", "product", {"name": "Butthead Golf Club Headcovers", "details": _AMAZON_DETAILS}),
        SkbNode("B1", "brand", {"name": "Butthead Covers"}),
        SkbNode("C1", "category", {"name": "head covers"}),
    ]
    nodes += [SkbNode(f"P{i + 1}", "product", {"name": n}) for i, n in enumerate(viewed)]
    edges = [SkbEdge("P0", "ALSO_VIEW", f"P{i + 1}") for i in range(len(viewed))]
    edges += [SkbEdge("C1", "HAS_CATEGORY", "P0"), SkbEdge("P0", "HAS_BRAND", "B1")]
    return SkbGraph(AMAZON_SCHEMA, nodes, edges), "P0", SerializationCaps(300, 10, relation_style="raw")


REFERENCE_NODES = {"prime": prime_node, "mag": mag_node, "amazon": amazon_node}


# -- worked plans --------------------------------------------------------


def amazon_fewshot_plans() -> list[tuple[str, str]]:
    """(question, plan text) pairs cut from the shipped Amazon prompt asset."""
    body = load_pack("amazon").system_blocks[0]
    section = body.split("## Few-shot examples", 1)[1]
    out = []
    for m in re.finditer(r'Q: "(.*?)"\n(\{.*?\n\})\n', section, re.S):
        out.append((m.group(1), m.group(2)))
    return out


def prime_worked_plan() -> str:
    block = load_pack("prime").system_blocks[1]
    return block.split("Plan:\n", 1)[1].strip()


def worked_plans() -> list[tuple[str, str, SkbSchema]]:
    plans = [(f"amazon:{q[:24]}", text, AMAZON_SCHEMA) for q, text in amazon_fewshot_plans()]
    plans.append(("prime:bismoth", prime_worked_plan(), PRIME_SCHEMA))
    plans.append(("mag:institution-author-paper", json.dumps(MAG_PLAN, indent=2), MAG_PLAN_SCHEMA))
    return plans
