"""
Unit tests for prompts, the reparameterization network and the prompting methods
"""

import numpy as np
import pytest

from src.autodiff.tensor import Tensor, backward, cross_entropy_logits
from src.core.errors import ConfigError, DataError, ShapeError
from src.data.vocab import BOS, EOS, SEP, SEP2
from src.lm.cache import PastSequence
from src.lm.checkpoint import save_checkpoint
from src.lm.config import LmConfig
from src.prompting.methods import (
    METHODS,
    DoublePrefixTuning,
    MultiStagePrompting,
    PrefixTuning,
    baked_names,
    baked_tensors,
    create_method,
    expected_parameter_count,
    load_method,
    source_context,
)
from src.prompting.msp import (
    decode_past,
    msp_decode_hidden,
    msp_encode,
    msp_reencode,
    msp_source_context,
)
from src.prompting.prefix import prefix_forward, prompt_tuning_forward
from src.prompting.prompts import (
    EmbeddingPrompt,
    PromptParams,
    StagePrompts,
    bake,
    prompt_past,
    reparameterize,
    share_single_prompt,
)
from tests.conftest import make_lm, random_ids


def _stage_loss(lm, prompts: StagePrompts, src, tgt) -> Tensor:
    """Summed target NLL of one pair through all three stages."""
    encoded = msp_encode(lm, src, prompts)
    reencoded = msp_reencode(lm, src, prompts, encoded)
    hidden = msp_decode_hidden(lm, [BOS] + list(tgt), prompts, reencoded)
    return cross_entropy_logits(lm.logits(hidden), np.array(list(tgt) + [EOS]))


def _stepwise(lm, tokens, past: PastSequence, tag: str):
    """One forward call per token; returns (hidden rows, the segment-by-segment past)."""
    rows = []
    for i, token in enumerate(tokens):
        out = lm.forward([token], past, position_offset=i, tag=tag)
        rows.append(out.hidden.data[0])
        past = past.then(out.segment)
    return np.stack(rows), past


def _activation_matrix(past: PastSequence, skip: int = 0) -> np.ndarray:
    return np.stack([a.vector() for a in past.activations()[skip:]])


class TestReparameterize:
    """tanh(B @ W1) @ W2 over the stacked stage blocks."""

    def test_zero_w2(self, prompt_params):
        """Test that W2 = 0 gives all-zero prompts."""
        prompt_params.w2.data[...] = 0.0
        prompts = reparameterize(prompt_params)
        for stage in (prompts.encode, prompts.reencode, prompts.decode):
            assert not stage.data.any()

    def test_zero_blocks(self, prompt_params):
        """Test that zero blocks give zero prompts whatever W1 and W2 are."""
        for block in prompt_params.blocks.values():
            block.data[...] = 0.0
        prompts = reparameterize(prompt_params)
        assert not prompts.decode.data.any()

    def test_hand_chain(self, float64):
        """Test an L=2, d=4, N=1 case against the explicit matrix chain."""
        config = LmConfig(n_layers=1, d_model=4, n_heads=1, vocab_size=12, max_positions=8)
        params = PromptParams.init(
            ("encode", "reencode", "decode"), 2, config, np.random.default_rng(7), std=0.8
        )
        stacked = np.vstack([params.blocks[s].data for s in ("encode", "reencode", "decode")])
        expected = np.tanh(stacked @ params.w1.data) @ params.w2.data

        prompts = reparameterize(params)
        assert prompts.encode.shape == (2, 8)
        np.testing.assert_allclose(prompts.encode.data, expected[0:2], atol=1e-12)
        np.testing.assert_allclose(prompts.reencode.data, expected[2:4], atol=1e-12)
        np.testing.assert_allclose(prompts.decode.data, expected[4:6], atol=1e-12)

    def test_shape_errors(self, tiny_config, float64):
        """Test that malformed parameter shapes are rejected."""
        rng = np.random.default_rng(0)
        block = Tensor(rng.normal(size=(3, 8)))
        with pytest.raises(ShapeError):
            PromptParams({"encode": block}, Tensor(np.zeros((8, 4))), Tensor(np.zeros((8, 32))))
        with pytest.raises(ShapeError):
            PromptParams(
                {"encode": block, "decode": Tensor(np.zeros((2, 8)))},
                Tensor(np.zeros((8, 8))),
                Tensor(np.zeros((8, 32))),
            )

    def test_missing_stage(self, tiny_config, float64):
        """Test that reparameterize needs all three stage blocks."""
        params = PromptParams.init(("prefix",), 3, tiny_config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            reparameterize(params)


class TestBake:
    """Inference prompts computed once."""

    def test_equals_reparameterize(self, prompt_params):
        """Test that baked prompts equal the live ones and carry no graph."""
        live = reparameterize(prompt_params)
        baked = bake(prompt_params)
        for stage in ("encode", "reencode", "decode"):
            np.testing.assert_array_equal(getattr(baked, stage).data, getattr(live, stage).data)
            assert not getattr(baked, stage).requires_grad

    def test_baked_checkpoint_smaller(self, tmp_path, prompt_params):
        """Test stored sizes when d^2 + 2Nd^2 > 3L(2Nd - d)."""
        d, n, length = 8, 2, 3
        assert d * d + 2 * n * d * d > 3 * length * (2 * n * d - d)
        trainable = save_checkpoint(tmp_path / "t.mspc", prompt_params.to_arrays())
        baked = save_checkpoint(tmp_path / "b.mspc", bake(prompt_params).to_arrays())
        assert baked.stat().st_size < trainable.stat().st_size

    def test_shared_prompt(self, tiny_config, float64):
        """Test that the shared variant repeats one prompt."""
        params = PromptParams.init(("shared",), 3, tiny_config, np.random.default_rng(2), std=0.5)
        prompts = bake(params, shared=True)
        np.testing.assert_array_equal(prompts.encode.data, prompts.reencode.data)
        np.testing.assert_array_equal(prompts.encode.data, prompts.decode.data)


class TestParameterCounts:
    """Trainable parameter bookkeeping per method."""

    @pytest.mark.parametrize("name", sorted(METHODS))
    def test_matches_formula(self, tiny_lm, name):
        """Test that created methods have the documented number of parameters."""
        method = create_method(name, tiny_lm, 3, np.random.default_rng(0))
        assert method.num_parameters() == expected_parameter_count(name, tiny_lm.config, 3)

    def test_closed_forms(self, tiny_config):
        """Test 3Ld + d^2 + 2Nd^2 for MSP and Ld for prompt tuning."""
        d, n, length = 8, 2, 3
        mlp = d * d + 2 * n * d * d
        assert expected_parameter_count("msp", tiny_config, length) == 3 * length * d + mlp
        assert expected_parameter_count("msp-shared", tiny_config, length) == length * d + mlp
        assert expected_parameter_count("prompt", tiny_config, length) == length * d
        assert length * d < length * tiny_config.activation_width

    def test_unknown_method(self, tiny_lm):
        """Test method name and prompt length validation."""
        with pytest.raises(ConfigError):
            create_method("lora", tiny_lm, 3, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            create_method("msp", tiny_lm, -1, np.random.default_rng(0))


class TestMultiStage:
    """Encoding, re-encoding and decoding stages."""

    def test_encode_length(self, tiny_lm, stage_prompts):
        """Test that the encoding has one activation per source token."""
        encoded = msp_encode(tiny_lm, [6, 7, 8, 9, 10], stage_prompts)
        assert len(encoded) == 5
        assert encoded.tags() == ["encoded"] * 5

    def test_encode_matches_stepwise(self, tiny_lm, stage_prompts):
        """Test H^e against token-at-a-time application with the prompt as past."""
        x = [6, 9, 7, 11, 8]
        encoded = msp_encode(tiny_lm, x, stage_prompts)
        start = prompt_past(stage_prompts.encode, tiny_lm.config)
        _, past = _stepwise(tiny_lm, x, start, "encoded")
        np.testing.assert_allclose(
            _activation_matrix(encoded), _activation_matrix(past, skip=3), atol=1e-5
        )

    def test_reencode_matches_stepwise(self, tiny_lm, stage_prompts):
        """Test that row i of H^r sees the prompt, all of H^e and x_0..x_i."""
        x = [6, 9, 7, 11, 8]
        encoded = msp_encode(tiny_lm, x, stage_prompts)
        reencoded = msp_reencode(tiny_lm, x, stage_prompts, encoded)
        start = prompt_past(stage_prompts.reencode, tiny_lm.config) + encoded
        _, past = _stepwise(tiny_lm, x, start, "reencoded")
        np.testing.assert_allclose(
            _activation_matrix(reencoded), _activation_matrix(past, skip=3 + 5), atol=1e-5
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_bidirectional_reencoding(self, tiny_config, float64, seed):
        """Test that the last source token reaches H^r[0] but not H^e[0]."""
        lm = make_lm(tiny_config, seed)
        params = PromptParams.init(
            ("encode", "reencode", "decode"), 3, tiny_config, np.random.default_rng(seed), 0.5
        )
        prompts = reparameterize(params)
        x = random_ids(np.random.default_rng(seed + 100), 6)
        changed = x[:-1] + [11 if x[-1] != 11 else 6]

        enc_a, enc_b = msp_encode(lm, x, prompts), msp_encode(lm, changed, prompts)
        np.testing.assert_allclose(
            enc_a.activations()[0].vector(), enc_b.activations()[0].vector(), atol=1e-12
        )
        re_a = msp_reencode(lm, x, prompts, enc_a)
        re_b = msp_reencode(lm, changed, prompts, enc_b)
        diff = np.abs(re_a.activations()[0].vector() - re_b.activations()[0].vector()).max()
        assert diff > 1e-8

    def test_stage_separation(self, tiny_lm, stage_prompts):
        """Test that distinct stage prompts give H^e != H^r."""
        x = [6, 7, 8]
        encoded = msp_encode(tiny_lm, x, stage_prompts)
        reencoded = msp_reencode(tiny_lm, x, stage_prompts, encoded)
        assert np.abs(_activation_matrix(encoded) - _activation_matrix(reencoded)).max() > 1e-8

    def test_positions_reset_per_stage(self, mocker, tiny_lm, stage_prompts):
        """Test that every stage embeds its tokens from position 0."""
        spy = mocker.spy(tiny_lm, "embed")
        reencoded = PastSequence(
            msp_source_context(tiny_lm, [6, 7, 8, 9], stage_prompts).segments[1:]
        )
        msp_decode_hidden(tiny_lm, [BOS, 6, 7], stage_prompts, reencoded)
        assert spy.call_count == 3
        for call in spy.call_args_list:
            positions = np.asarray(call.args[1])
            assert positions.min() == 0
            np.testing.assert_array_equal(positions[0], np.arange(positions.shape[-1]))

    def test_reencode_length_mismatch(self, tiny_lm, stage_prompts):
        """Test that H^e must cover exactly the source."""
        encoded = msp_encode(tiny_lm, [6, 7, 8], stage_prompts)
        with pytest.raises(ShapeError):
            msp_reencode(tiny_lm, [6, 7], stage_prompts, encoded)

    def test_overlong_source(self, tiny_lm, stage_prompts):
        """Test the max_positions precondition on the source."""
        with pytest.raises(ShapeError, match="position overflow"):
            msp_encode(tiny_lm, [6] * 41, stage_prompts)

    def test_decode_requires_bos(self, tiny_lm, stage_prompts):
        """Test that decoder input must start with BOS."""
        context = msp_source_context(tiny_lm, [6, 7], stage_prompts)
        reencoded = PastSequence(context.segments[1:])
        with pytest.raises(DataError):
            msp_decode_hidden(tiny_lm, [6, 7], stage_prompts, reencoded)

    def test_decode_past_drops_encoding(self, tiny_lm, stage_prompts):
        """Test that the decoding stage sees P^d and H^r only."""
        x = [6, 7, 8]
        encoded = msp_encode(tiny_lm, x, stage_prompts)
        reencoded = msp_reencode(tiny_lm, x, stage_prompts, encoded)
        past = decode_past(tiny_lm, stage_prompts, reencoded)
        assert past.tags() == ["prompt"] * 3 + ["reencoded"] * 3

    def test_decode_causality_and_stepwise(self, tiny_lm, stage_prompts):
        """Test that G[0] ignores later targets and teacher forcing matches stepping."""
        context = msp_source_context(tiny_lm, [6, 7, 8], stage_prompts)
        reencoded = PastSequence(context.segments[1:])
        y = [BOS, 9, 10, 11]
        g = msp_decode_hidden(tiny_lm, y, stage_prompts, reencoded).data
        assert g.shape == (4, 8)

        other = msp_decode_hidden(tiny_lm, [BOS, 6, 6, 6], stage_prompts, reencoded).data
        np.testing.assert_allclose(g[0], other[0], atol=1e-12)

        rows, _ = _stepwise(tiny_lm, y, context, "decoded")
        np.testing.assert_allclose(g, rows, atol=1e-5)

    def test_empty_prompts_are_chained_forwards(self, tiny_lm):
        """Test that L=0 stages reduce to plain forwards of x, x and y."""
        empty = Tensor(np.zeros((0, tiny_lm.config.activation_width)))
        prompts = StagePrompts(empty, empty, empty)
        x, y = [6, 8, 10], [BOS, 7, 9]

        first = tiny_lm.forward(x)
        second = tiny_lm.forward(x, PastSequence((first.segment,)))
        expected = tiny_lm.forward(y, PastSequence((second.segment,))).hidden.data

        encoded = msp_encode(tiny_lm, x, prompts)
        reencoded = msp_reencode(tiny_lm, x, prompts, encoded)
        g = msp_decode_hidden(tiny_lm, y, prompts, reencoded).data
        np.testing.assert_allclose(g, expected, atol=1e-12)


class TestSharedPrompt:
    """One prompt for all three stages."""

    def test_gradient_is_sum_of_stage_paths(self, tiny_lm, tiny_config):
        """Test the shared-block gradient against three stop-gradient runs."""
        params = PromptParams.init(("shared",), 3, tiny_config, np.random.default_rng(4), 0.5)
        block = params.blocks["shared"]
        src, tgt = [6, 7, 8], [9, 10]

        backward(_stage_loss(tiny_lm, share_single_prompt(params), src, tgt))
        total = block.grad.copy()

        parts = []
        for stage in ("encode", "reencode", "decode"):
            block.zero_grad()
            prompt = share_single_prompt(params).encode
            stages = {
                s: prompt if s == stage else prompt.detach()
                for s in ("encode", "reencode", "decode")
            }
            backward(_stage_loss(tiny_lm, StagePrompts(**stages), src, tgt))
            parts.append(block.grad.copy())

        assert all(np.abs(p).max() > 0 for p in parts)
        np.testing.assert_allclose(total, sum(parts), atol=1e-10)


class TestEncodingPromptReach:
    """Depth needed for the encoding prompt to influence the loss."""

    @pytest.mark.parametrize("n_layers, reaches", [(2, False), (3, True)])
    def test_encode_block_moves_loss(self, float64, n_layers, reaches):
        """Test that the encoding prompt reaches the loss only from three layers on."""
        config = LmConfig(
            n_layers=n_layers,
            d_model=8,
            n_heads=2,
            vocab_size=12,
            max_positions=40,
            prompt_length=2,
            init_std=0.3,
        )
        method = create_method("msp", make_lm(config), 2, np.random.default_rng(1), 0.5)
        pair = ([6, 7, 8], [9, 10])
        before = method.batch_loss([pair])[0].item()
        method.params.blocks["encode"].data += 0.5
        after = method.batch_loss([pair])[0].item()
        if reaches:
            assert abs(after - before) > 1e-8
        else:
            assert after == before


class TestSingleStageMethods:
    """Prefix-tuning and prompt tuning."""

    def test_prefix_without_prompt(self, tiny_lm):
        """Test that a missing or empty prefix is a plain forward."""
        tokens = [6, 7, 3, 8, 9]
        plain = tiny_lm.forward(tokens).hidden.data
        np.testing.assert_allclose(prefix_forward(tiny_lm, tokens, None).hidden.data, plain)
        empty = Tensor(np.zeros((0, tiny_lm.config.activation_width)))
        np.testing.assert_allclose(prefix_forward(tiny_lm, tokens, empty).hidden.data, plain)

    def test_prompt_tuning_without_prompt(self, tiny_lm):
        """Test that L=0 pseudo-tokens leave the forward unchanged."""
        tokens = [6, 7, 3, 8, 9]
        plain = tiny_lm.forward(tokens).hidden.data
        empty = EmbeddingPrompt(Tensor(np.zeros((0, 8))))
        np.testing.assert_allclose(
            prompt_tuning_forward(tiny_lm, tokens, empty).hidden.data, plain
        )
        np.testing.assert_allclose(prompt_tuning_forward(tiny_lm, tokens, None).hidden.data, plain)

    def test_zero_embedding_prompt_not_absent(self, tiny_lm):
        """Test that zero pseudo-tokens still take positions and attention."""
        tokens = [6, 7, 3, 8, 9]
        plain = tiny_lm.forward(tokens).hidden.data
        zeros = EmbeddingPrompt(Tensor(np.zeros((3, 8))))
        out = prompt_tuning_forward(tiny_lm, tokens, zeros).hidden.data
        assert out.shape == plain.shape
        assert np.abs(out - plain).max() > 1e-6

    def test_prompt_tuning_overflow(self, tiny_lm):
        """Test that L plus the template must fit max_positions."""
        eprompt = EmbeddingPrompt(Tensor(np.zeros((3, 8))))
        with pytest.raises(ShapeError, match="position overflow"):
            prompt_tuning_forward(tiny_lm, [6] * 38, eprompt)

    def test_loss_covers_target_only(self, tiny_lm, tiny_config):
        """Test the token count of the template loss."""
        params = PromptParams.init(("prefix",), 3, tiny_config, np.random.default_rng(0), 0.5)
        _, n_tokens = PrefixTuning(tiny_lm, params).batch_loss([([6, 7, 8], [9, 10])])
        assert n_tokens == 3

    def test_double_template_changes_loss(self, tiny_lm, tiny_config):
        """Test that the two templates give different losses for one prompt."""
        params = PromptParams.init(("prefix",), 3, tiny_config, np.random.default_rng(0), 0.5)
        pair = [([6, 7, 8], [9, 10, 11])]
        single, n_single = PrefixTuning(tiny_lm, params).batch_loss(pair)
        double, n_double = DoublePrefixTuning(tiny_lm, params).batch_loss(pair)
        assert n_single == n_double == 4
        assert abs(single.item() - double.item()) > 1e-8

    def test_prefix_needs_block(self, tiny_lm, tiny_config):
        """Test that prefix-tuning refuses stage blocks."""
        params = PromptParams.init(("encode",), 3, tiny_config, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            PrefixTuning(tiny_lm, params)


class TestDecodeStart:
    """Source-side decoding state per method."""

    @pytest.mark.parametrize(
        "name, first, position, past_length",
        [
            ("msp", BOS, 0, 3 + 4),
            ("msp-shared", BOS, 0, 3 + 4),
            ("prefix", SEP, 4, 3 + 4),
            ("prefix-double", SEP2, 9, 3 + 9),
            ("prompt", SEP, 3 + 4, 3 + 4),
        ],
    )
    def test_start_state(self, tiny_lm, name, first, position, past_length):
        """Test first token, its position and the past length."""
        method = create_method(name, tiny_lm, 3, np.random.default_rng(0), std=0.5)
        prompts = baked_tensors(method.bake())
        assert sorted(prompts) == sorted(baked_names(name))
        start = source_context(name, tiny_lm, prompts, [6, 7, 8, 9])
        assert (start.first_token, start.start_position) == (first, position)
        assert len(start.past) == past_length

    def test_empty_source(self, tiny_lm):
        """Test that decoding needs a non-empty source."""
        method = create_method("msp", tiny_lm, 3, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            source_context("msp", tiny_lm, baked_tensors(method.bake()), [])

    def test_reload_reproduces_bake(self, tiny_lm):
        """Test that trainable arrays restore the same inference prompts."""
        method = create_method("msp", tiny_lm, 3, np.random.default_rng(0), std=0.5)
        restored = load_method("msp", tiny_lm, method.trainable_arrays())
        assert isinstance(restored, MultiStagePrompting)
        for name, array in method.bake().items():
            np.testing.assert_array_equal(restored.bake()[name], array)

    def test_baked_tensors_read_only(self, tiny_lm):
        """Test that baked prompts cannot be written."""
        method = create_method("prefix", tiny_lm, 3, np.random.default_rng(0))
        prompts = baked_tensors(method.bake())
        with pytest.raises(ValueError):
            prompts["prompt.prefix"].data[0, 0] = 1.0
