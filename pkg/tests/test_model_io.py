"""Model text parsing, serialization round-trips, weight sidecar."""

import io

import numpy as np
import pytest

from lipcert.graph import (
    Activation,
    Block,
    Conv2d,
    Dense,
    collect_params,
    iter_layers,
    structurally_equal,
)
from lipcert.model_io import (
    ParseError,
    init_params,
    load_weights,
    parse_model,
    read_weights_stream,
    save_weights,
    serialize_model,
    write_weights_stream,
)


class TestParse:
    def test_small_conv_net_is_seven_node_sequence(self, small_conv_net_text):
        g = parse_model(small_conv_net_text)
        assert len(g.nodes) == 7
        kinds = [type(n).__name__ for n in g.nodes]
        assert kinds == [
            "Conv2d", "Activation", "Conv2d", "Activation",
            "Dense", "Activation", "Dense",
        ]
        assert g.input_shape == (1, 28, 28)
        assert g.class_count == 10
        conv1, conv2 = g.nodes[0], g.nodes[2]
        assert conv1.out_shape == (16, 14, 14)
        assert conv2.out_shape == (32, 7, 7)
        assert g.nodes[4].weight.shape == (100, 32 * 7 * 7)
        assert g.nodes[6].weight.shape == (10, 100)

    def test_empty_body_errors(self):
        with pytest.raises(ParseError, match="empty"):
            parse_model("")
        with pytest.raises(ParseError, match="empty"):
            parse_model("# just a comment\n\n")

    def test_missing_input_errors(self):
        with pytest.raises(ParseError, match="input"):
            parse_model("fc out=3\n")

    def test_unknown_layer_kind_reports_line(self):
        with pytest.raises(ParseError, match="line 3"):
            parse_model("input 4\nfc out=3\nwibble out=2\n")

    def test_shape_inconsistency_reports_line(self):
        with pytest.raises(ParseError, match="line 2"):
            parse_model("input 4\nconv out=2 k=3x3\n")
        with pytest.raises(ParseError, match="line 2"):
            parse_model("input 1x4x4\nconv out=2 k=6x6\n")

    def test_add_block_two_branch_dag(self):
        text = """input 1x8x8
block add {
conv out=4 k=3x3 pad=1
relu
} {
conv out=4 k=1x1
}
"""
        g = parse_model(text)
        assert len(g.nodes) == 1
        block = g.nodes[0]
        assert isinstance(block, Block) and block.kind == "add"
        assert len(block.branches) == 2
        assert block.out_shape == (4, 8, 8)

    def test_add_block_shape_disagreement_errors(self):
        text = """input 1x8x8
block add {
conv out=4 k=3x3
} {
conv out=4 k=1x1
}
"""
        with pytest.raises(ParseError, match="disagree"):
            parse_model(text)

    def test_empty_branch_is_identity(self):
        text = "input 1x8x8\nblock add {\nconv out=1 k=3x3 pad=1\n} {\n}\n"
        g = parse_model(text)
        assert g.nodes[0].branches[1] == ()

    def test_unclosed_block_errors(self):
        with pytest.raises(ParseError, match="unclosed"):
            parse_model("input 4\nblock add {\nfc out=4\n")

    def test_single_branch_block_errors(self):
        with pytest.raises(ParseError, match="two"):
            parse_model("input 4\nblock add {\nfc out=4\n}\n")

    def test_inline_block_syntax(self):
        g = parse_model("input 4\nblock concat { fc out=2 } { fc out=3 }\n")
        assert g.nodes[0].out_shape == (5,)

    def test_activation_alpha(self):
        g = parse_model("input 4\nleaky_relu alpha=0.3\nelu alpha=2\n")
        acts = list(iter_layers(g))
        assert acts[0].alpha == 0.3 and acts[1].alpha == 2.0

    def test_pool_stride_defaults_to_kernel(self):
        g = parse_model("input 1x8x8\nmaxpool k=2\n")
        layer = g.nodes[0]
        assert layer.kernel == (2, 2) and layer.stride == (2, 2)

    def test_batchnorm_eps_validation(self):
        with pytest.raises(ParseError, match="eps"):
            parse_model("input 4\nbatchnorm eps=0\n")


class TestRoundTrip:
    CASES = [
        "input 4\nfc out=3\nrelu\nfc out=2\n",
        "input 1x28x28\nconv out=16 k=4x4 pad=1 stride=2\nrelu\nfc out=10\n",
        "input 2x8x8\nblock add {\nconv out=2 k=3x3 pad=1\nrelu\n} {\n}\n"
        "maxpool k=2 stride=2\nbatchnorm\navgpool k=2 stride=2\nfc out=3\n",
        "input 4\nblock concat { fc out=2 } { fc out=3 } { fc out=1 }\n"
        "leaky_relu alpha=0.2\nsigmoid\ntanh\nsoftplus\nelu alpha=1.5\nfc out=2\n",
    ]

    @pytest.mark.parametrize("text", CASES)
    def test_serialize_parse_round_trip(self, text):
        g = parse_model(text)
        again = parse_model(serialize_model(g))
        assert structurally_equal(g, again)
        # serialization is a fixed point after one round
        assert serialize_model(again) == serialize_model(g)


class TestWeights:
    def test_stream_round_trip(self, rng):
        params = {
            "a.weight": rng.standard_normal((3, 4)),
            "a.bias": rng.standard_normal(3),
            "z.scalarish": rng.standard_normal(1),
        }
        buf = io.BytesIO()
        write_weights_stream(buf, params)
        buf.seek(0)
        back = read_weights_stream(buf)
        assert set(back) == set(params)
        for k in params:
            assert np.array_equal(back[k], params[k])

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            read_weights_stream(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_truncated_payload(self, rng):
        buf = io.BytesIO()
        write_weights_stream(buf, {"w": rng.standard_normal((2, 2))})
        raw = buf.getvalue()
        with pytest.raises(ValueError, match="truncated"):
            read_weights_stream(io.BytesIO(raw[:-5]))

    def test_save_load_graph(self, tmp_path, rng, small_conv_net_text):
        g = init_params(parse_model(small_conv_net_text), 5)
        path = tmp_path / "w.lmtw"
        save_weights(g, path)
        g2 = load_weights(parse_model(small_conv_net_text), path)
        p1, p2 = collect_params(g), collect_params(g2)
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)

    def test_load_rejects_architecture_mismatch(self, tmp_path):
        g = init_params(parse_model("input 4\nfc out=3\n"), 0)
        path = tmp_path / "w.lmtw"
        save_weights(g, path)
        other = parse_model("input 4\nfc out=3\nrelu\nfc out=2\n")
        with pytest.raises(ValueError, match="missing"):
            load_weights(other, path)

    def test_init_params_deterministic(self, small_conv_net_text):
        a = collect_params(init_params(parse_model(small_conv_net_text), 9))
        b = collect_params(init_params(parse_model(small_conv_net_text), 9))
        c = collect_params(init_params(parse_model(small_conv_net_text), 10))
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)
