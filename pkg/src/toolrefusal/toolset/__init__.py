"""Tool corpus construction: templates, sibling samples, extensions, counterfactuals."""

from .alignment import check_structural_alignment, maximum_matching, sample_alignment
from .builders import (
    build_random_pairs,
    build_sibling_samples,
    extend_template,
    extend_to_degree,
    instantiate_all,
    instantiate_tool,
    split_by_template,
    split_template_ids,
)
from .corpus import (
    Corpus,
    build_corpus,
    build_degree_series,
    bundled_templates,
    load_corpus,
    load_samples,
    load_templates,
    write_corpus,
    write_samples,
)
from .counterfactuals import flatten_tool, make_semantic_counterfactual, make_structural_counterfactual
from .queries import GenerationBackend, GenerationRequest, generate_queries, propose_extension_params
from .types import (
    Attribute,
    CompatRelation,
    Lineage,
    ParamSpec,
    Query,
    Sample,
    ToolInstance,
    ToolsetError,
    ToolTemplate,
)
