import json
import struct

import numpy as np
import pytest

import helpers
from layermask import graph as G
from layermask import tensor as T
from layermask.errors import FileFormatError, GraphError

F32 = np.float32


def chain_doc():
    return {
        "input_shape": [2, 4, 4],
        "feature_tap": "gap",
        "layers": [
            {"id": "in", "op": "input", "params": {}, "inputs": [], "weight_names": {}},
            {"id": "c", "op": "conv",
             "params": {"out_channels": 2, "in_channels": 2, "kernel": 3,
                        "stride": 1, "zero_padding": 1, "has_bias": False},
             "inputs": ["in"], "weight_names": {"weight": "c.w"}},
            {"id": "r", "op": "relu", "params": {}, "inputs": ["c"], "weight_names": {}},
            {"id": "gap", "op": "avgpool_global", "params": {}, "inputs": ["r"],
             "weight_names": {}},
            {"id": "fc", "op": "linear",
             "params": {"in_features": 2, "out_features": 3, "has_bias": True},
             "inputs": ["gap"], "weight_names": {"weight": "fc.w", "bias": "fc.b"}},
            {"id": "out", "op": "output", "params": {}, "inputs": ["fc"],
             "weight_names": {}},
        ],
    }


class TestLoadGraph:
    def test_chain_parses_to_six_nodes(self):
        g = G.load_graph(json.dumps(chain_doc()))
        assert len(g.layers) == 6
        assert g.input_id == "in" and g.output_id == "out"
        assert g.shapes["gap"] == (2,)
        assert g.shapes["out"] == (3,)

    def test_self_reference_is_cycle_error(self):
        doc = chain_doc()
        doc["layers"][2]["inputs"] = ["r"]
        with pytest.raises(GraphError, match="cycle.*'r'"):
            G.load_graph(json.dumps(doc))

    def test_two_node_cycle_named(self):
        doc = chain_doc()
        doc["layers"][1]["inputs"] = ["r"]
        doc["layers"][2]["inputs"] = ["c"]
        with pytest.raises(GraphError, match="cycle"):
            G.load_graph(json.dumps(doc))

    def test_add_arity_enforced(self):
        doc = chain_doc()
        doc["layers"].insert(3, {"id": "a", "op": "add", "params": {},
                                 "inputs": ["c"], "weight_names": {}})
        with pytest.raises(GraphError, match="'a'.*2 inputs"):
            G.load_graph(json.dumps(doc))

    def test_dangling_reference_named(self):
        doc = chain_doc()
        doc["layers"][2]["inputs"] = ["ghost"]
        with pytest.raises(GraphError, match="'r'.*unknown input 'ghost'"):
            G.load_graph(json.dumps(doc))

    def test_duplicate_id_rejected(self):
        doc = chain_doc()
        doc["layers"][2]["id"] = "c"
        with pytest.raises(GraphError, match="duplicate"):
            G.load_graph(json.dumps(doc))

    def test_one_input_one_output(self):
        doc = chain_doc()
        doc["layers"][0]["op"] = "relu"
        doc["layers"][0]["inputs"] = ["c"]
        with pytest.raises(GraphError, match="exactly one input"):
            G.load_graph(json.dumps(doc))

    def test_feature_tap_must_reach_output(self):
        doc = chain_doc()
        doc["feature_tap"] = "out"
        with pytest.raises(GraphError, match="feature_tap"):
            G.load_graph(json.dumps(doc))

    def test_not_json(self):
        with pytest.raises(GraphError, match="JSON"):
            G.load_graph("{nope")

    def test_unknown_param_named(self):
        doc = chain_doc()
        doc["layers"][1]["params"]["dilation"] = 2
        with pytest.raises(GraphError, match="'c'.*dilation"):
            G.load_graph(json.dumps(doc))

    def test_declaration_order_breaks_topo_ties(self):
        doc = chain_doc()
        # two parallel relus off the conv, joined by add; order must follow declaration
        doc["layers"][2:3] = [
            {"id": "rb", "op": "relu", "params": {}, "inputs": ["c"], "weight_names": {}},
            {"id": "ra", "op": "relu", "params": {}, "inputs": ["c"], "weight_names": {}},
            {"id": "j", "op": "add", "params": {}, "inputs": ["rb", "ra"],
             "weight_names": {}},
        ]
        doc["layers"][5]["inputs"] = ["j"]  # gap reads the join
        g = G.load_graph(json.dumps(doc))
        order = [l.id for l in g.layers]
        assert order.index("rb") < order.index("ra")


class TestWeightStore:
    def test_empty_store_is_eight_bytes(self):
        data = G.save_weights({})
        assert len(data) == 8
        assert G.load_weights(data) == {}

    def test_round_trip_bit_exact(self):
        t = np.array([[1.25, -2.5], [3e-7, 4e8]], dtype=F32)
        data = G.save_weights({"w": t})
        back = G.load_weights(data)
        assert list(back) == ["w"]
        assert back["w"].dtype == np.float32
        assert np.array_equal(back["w"], t)
        assert G.save_weights(back) == data

    def test_bad_magic(self):
        with pytest.raises(FileFormatError, match="magic"):
            G.load_weights(b"XXXX" + struct.pack("<I", 0))

    def test_truncated_payload(self):
        data = G.save_weights({"w": np.ones((2, 2), dtype=F32)})
        with pytest.raises(FileFormatError, match="truncated"):
            G.load_weights(data[:-4])

    def test_duplicate_name(self):
        one = G.save_weights({"w": np.ones(1, dtype=F32)})
        # splice the same record twice
        record = one[8:]
        dup = b"LMW1" + struct.pack("<I", 2) + record + record
        with pytest.raises(FileFormatError, match="duplicate"):
            G.load_weights(dup)

    def test_trailing_bytes_rejected(self):
        data = G.save_weights({}) + b"\x00"
        with pytest.raises(FileFormatError, match="trailing"):
            G.load_weights(data)


class TestForward:
    def _store(self, delta=True):
        w = np.zeros((2, 2, 3, 3), dtype=F32)
        if delta:
            w[0, 0, 1, 1] = 1.0
            w[1, 1, 1, 1] = 1.0
        fc_w = np.array([[1, 0], [0, 1], [1, 1]], dtype=F32)
        fc_b = np.array([0.5, -0.5, 0.0], dtype=F32)
        return {"c.w": w, "fc.w": fc_w, "fc.b": fc_b}

    def test_delta_conv_equals_head_on_pooled_input(self, rng):
        g = G.load_graph(json.dumps(chain_doc()))
        store = self._store()
        x = rng.uniform(0, 1, (2, 4, 4)).astype(F32)  # nonnegative so relu is identity
        logits, feats = G.forward(g, store, x)
        pooled = T.global_avgpool(x)
        assert np.array_equal(feats, pooled)
        assert np.array_equal(logits, T.linear(pooled, store["fc.w"], store["fc.b"]))

    def test_zero_weights_give_bias(self, rng):
        g = G.load_graph(json.dumps(chain_doc()))
        store = self._store(delta=False)
        x = rng.standard_normal((2, 4, 4)).astype(F32)
        logits, _ = G.forward(g, store, x)
        assert np.array_equal(logits, store["fc.b"])

    def test_input_shape_checked(self, toy):
        g, store = toy
        with pytest.raises(ValueError, match="input shape"):
            G.forward(g, store, np.zeros((3, 16, 16), dtype=F32))

    def test_weight_shape_mismatch_names_layer(self):
        g = G.load_graph(json.dumps(chain_doc()))
        store = self._store()
        store["c.w"] = np.zeros((2, 2, 5, 5), dtype=F32)
        with pytest.raises(GraphError, match="'c'"):
            G.forward(g, store, np.zeros((2, 4, 4), dtype=F32))

    def test_missing_weight_names_layer(self):
        g = G.load_graph(json.dumps(chain_doc()))
        store = self._store()
        del store["fc.b"]
        with pytest.raises(GraphError, match="'fc'"):
            G.forward(g, store, np.zeros((2, 4, 4), dtype=F32))

    def test_pure_function_repeatable(self, toy, rng):
        g, store = toy
        x = rng.standard_normal(g.input_shape).astype(F32)
        l1, f1 = G.forward(g, store, x)
        l2, f2 = G.forward(g, store, x)
        assert np.array_equal(l1, l2) and np.array_equal(f1, f2)

    def test_toy_regression_lock(self, toy, goldens):
        g, store = toy
        x = np.random.default_rng(goldens["input_seed"]).random((3, 32, 32),
                                                                dtype=F32)
        logits, feats = G.forward(g, store, x)
        assert np.allclose(logits, goldens["logits"], rtol=1e-5, atol=1e-6)
        assert np.allclose(feats, goldens["features"], rtol=1e-5, atol=1e-6)

    def test_random_graphs_execute(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            g, store = helpers.random_spatial_graph(rng)
            x = rng.standard_normal(g.input_shape).astype(F32)
            logits, feats = G.forward(g, store, x)
            assert logits.shape == (3,)
            assert np.isfinite(logits).all() and np.isfinite(feats).all()
