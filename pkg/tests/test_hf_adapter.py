"""The Hugging Face adapter on a small randomly initialised Qwen3."""

import copy
from dataclasses import replace

import numpy as np
import pytest
import torch

transformers = pytest.importorskip("transformers")

from toolrefusal.adapter import Edge, InterventionPlan, RegexTokenizer, load_profile  # noqa: E402
from toolrefusal.adapter.hf import HFAdapter  # noqa: E402

VOCAB = 96


@pytest.fixture(scope="module")
def qwen():
    torch.manual_seed(0)
    cfg = transformers.Qwen3Config(
        vocab_size=VOCAB, hidden_size=32, intermediate_size=64, num_hidden_layers=2,
        num_attention_heads=4, num_key_value_heads=2, head_dim=8, max_position_embeddings=512,
    )
    model = transformers.Qwen3ForCausalLM(cfg).double()
    profile = replace(load_profile("tiny"), profile_id="tiny-qwen3")
    adapter = HFAdapter(model, RegexTokenizer(VOCAB, 4), profile)
    ref = transformers.Qwen3ForCausalLM(copy.deepcopy(cfg)).double()
    ref.load_state_dict(model.state_dict())
    ref.set_attn_implementation("eager")
    return adapter, ref


@pytest.fixture(scope="module")
def prompt(qwen, small_corpus):
    return qwen[0].render(small_corpus.samples[0])


def test_logits_match_stock_eager_attention(qwen, prompt):
    adapter, ref = qwen
    with torch.no_grad():
        want = ref(torch.tensor([prompt.token_ids])).logits[0, -1].double().numpy()
    np.testing.assert_allclose(adapter.logits(prompt), want, atol=1e-6)


def test_captured_attention_is_causal_and_normalised(qwen, prompt):
    _, attn = qwen[0].forward_with_attention(prompt)
    assert attn.shape == (2, 4, len(prompt), len(prompt))
    np.testing.assert_allclose(attn.sum(-1), 1.0, atol=1e-5)
    assert np.all(np.triu(attn, 1) == 0)


def test_unit_plan_is_noop_and_scaling_acts(qwen, prompt):
    adapter = qwen[0]
    base = adapter.next_token_distribution(prompt)
    unit = InterventionPlan((Edge(1, 2, "user-query", "tool-definition", 1.0),))
    assert np.array_equal(adapter.forward_with_intervention(prompt, unit), base)
    strong = InterventionPlan((Edge(1, 2, "assistant-start", "user-query", 3.0),))
    assert np.abs(adapter.forward_with_intervention(prompt, strong) - base).max() > 1e-6
    handle = adapter.with_plan(strong)
    assert np.array_equal(adapter.next_token_distribution(prompt), base)
    np.testing.assert_array_equal(handle.next_token_distribution(prompt),
                                  adapter.forward_with_intervention(prompt, strong))


def test_gradients_against_finite_differences(qwen, prompt):
    # the model's norms run in float32, which bounds the achievable agreement
    adapter = qwen[0]
    g = adapter.metric_gradients(prompt, "m_sem")
    T = len(prompt)
    sites = np.array([(l, h, T - 1, j) for l in range(2) for h in range(4) for j in range(0, T, 9)])
    h = 1e-3
    fd = (adapter.site_metrics(prompt, "m_sem", sites, h, "add")
          - adapter.site_metrics(prompt, "m_sem", sites, -h, "add")) / (2 * h)
    np.testing.assert_allclose(fd, g.grad[tuple(sites.T)], atol=1e-3)


def test_identity_names_model_and_profile(qwen):
    ident = qwen[0].identity
    assert "Qwen3ForCausalLM" in ident and ident.endswith("profile=tiny-qwen3")
