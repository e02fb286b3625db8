import json

import pytest

from galore_lite.errors import ParameterError
from galore_lite.matcore import Rng
from galore_lite.memmodel import (
    LayerShape,
    ModelSpec,
    Sharding,
    Strategy,
    elements_galore,
    elements_lora,
    llama7b,
    model_report,
)


class TestFormulas:
    def test_galore_4x4_rank2(self):
        # weights 16 + projector 8 + moments 16 = 40
        counts = elements_galore(4, 4, 2)
        assert counts["weights"] == 16
        assert counts["projector"] == 8
        assert counts["optimizer_state"] == 16
        assert counts["total"] == 40
        # accumulated low-rank gradient adds max(m,n)*r = 8
        with_accum = elements_galore(4, 4, 2, with_grad_accum=True)
        assert with_accum["lowrank_grad_accum"] == 8
        assert with_accum["total"] == 48

    def test_galore_optimizer_state_shrinks(self):
        counts = elements_galore(4, 4, 2)
        assert counts["optimizer_state"] == 16 < 32  # 2nr < 2mn

    def test_rank_zero_rejected(self):
        with pytest.raises(ParameterError):
            elements_galore(4, 4, 0)
        with pytest.raises(ParameterError):
            elements_lora(4, 4, 0)

    def test_rank_exceeds_min_rejected(self):
        with pytest.raises(ParameterError):
            elements_galore(4, 6, 5)

    def test_lora_4x4_rank2(self):
        counts = elements_lora(4, 4, 2)
        assert counts["total"] == 16 + 24 + 24  # mn + 3mr + 3nr

    def test_lora_2x2_rank1(self):
        assert elements_lora(2, 2, 1)["total"] == 4 + 6 + 6

    def test_galore_always_below_lora(self):
        rng = Rng(1)
        for _ in range(200):
            m = int(rng.integers(1, 64)[0]) + 1
            n = int(rng.integers(1, 64)[0]) + 1
            r = int(rng.integers(1, min(m, n))[0]) + 1
            r = min(r, min(m, n))
            assert elements_galore(m, n, r)["total"] < elements_lora(m, n, r)["total"]

    def test_optimizer_state_inequality_both_directions(self):
        # low-rank moments beat full Adam iff r < min(m, n)
        for (m, n, r) in ((16, 64, 8), (64, 16, 8)):
            assert elements_galore(m, n, r)["optimizer_state"] < 2 * m * n
        for (m, n) in ((16, 64), (64, 16)):
            r = min(m, n)
            assert elements_galore(m, n, r)["optimizer_state"] == 2 * m * n


class TestLlamaPreset:
    def test_shapes(self):
        spec = llama7b()
        names = {layer.name for layer in spec.layers}
        assert names == {"attn_qkvo", "mlp_gate_up", "mlp_down"}
        total = sum(l.m * l.n * l.count for l in spec.layers)
        # 32 * (4 * 4096^2 + 3 * 4096 * 11008)
        assert total == 32 * (4 * 4096 * 4096 + 3 * 4096 * 11008)

    def test_galore_optimizer_state_smaller_per_layer(self):
        spec = llama7b()
        r = 1024
        for layer in spec.layers:
            low = elements_galore(layer.m, layer.n, r)["optimizer_state"]
            assert low < 2 * layer.m * layer.n

    def test_fsdp_ordering_galore_below_adamw(self):
        spec = llama7b()
        shard = Sharding(kind="fsdp", world=2)
        galore = model_report(spec, Strategy(kind="galore", rank=1024), shard)
        adamw = model_report(spec, Strategy(kind="full_adam"), shard)
        assert galore.per_rank_total_bytes() < adamw.per_rank_total_bytes()

    def test_lora_above_galore_same_rank(self):
        spec = llama7b()
        galore = model_report(spec, Strategy(kind="galore", rank=1024))
        lora = model_report(spec, Strategy(kind="lora", rank=1024))
        assert galore.grand_total_bytes() < lora.grand_total_bytes()


class TestModelReport:
    def small_spec(self, dtype_bytes=4):
        return ModelSpec(
            name="toy",
            layers=[LayerShape("a", 8, 32, count=2), LayerShape("b", 16, 8, count=1)],
            dtype_bytes=dtype_bytes,
        )

    def test_additive_over_layers(self):
        spec = self.small_spec()
        rep = model_report(spec, Strategy(kind="galore", rank=4))
        for cat in ("weights", "optimizer_state", "projector"):
            rowsum = sum(row["bytes"][cat] for row in rep.per_layer)
            assert rep.total_bytes[cat] == rowsum

    def test_linear_in_dtype_bytes(self):
        for strategy in (Strategy(kind="full_adam"), Strategy(kind="galore", rank=4),
                         Strategy(kind="lora", rank=4)):
            rep4 = model_report(self.small_spec(4), strategy)
            rep8 = model_report(self.small_spec(8), strategy)
            assert rep8.grand_total_bytes() == 2 * rep4.grand_total_bytes()

    def test_fsdp_world2_halves_shardable(self):
        spec = self.small_spec()
        strat = Strategy(kind="galore", rank=4)
        rep1 = model_report(spec, strat, Sharding(kind="fsdp", world=1))
        rep2 = model_report(spec, strat, Sharding(kind="fsdp", world=2))
        for cat in ("weights", "optimizer_state", "projector"):
            assert rep2.per_rank_bytes[cat] == rep1.per_rank_bytes[cat] / 2

    def test_ddp_replicates(self):
        spec = self.small_spec()
        strat = Strategy(kind="full_adam")
        rep = model_report(spec, strat, Sharding(kind="ddp", world=4))
        assert rep.per_rank_bytes["weights"] == rep.total_bytes["weights"]

    def test_grad_peak_fused_vs_accumulate(self):
        spec = self.small_spec()
        strat = Strategy(kind="galore", rank=4)
        fused = model_report(spec, strat, Sharding(kind="fsdp", world=2))
        full = model_report(spec, strat, Sharding(kind="ddp", world=2))
        # fused: largest layer; accumulate-all: sum over all layer instances
        assert fused.total_elements["fullrank_grad_peak"] == 8 * 32
        assert full.total_elements["fullrank_grad_peak"] == 2 * 8 * 32 + 16 * 8
        assert fused.total_elements["fullrank_grad_peak"] < full.total_elements["fullrank_grad_peak"]

    def test_adam8bit_bytes_below_full(self):
        spec = self.small_spec()
        full = model_report(spec, Strategy(kind="full_adam"))
        low = model_report(spec, Strategy(kind="adam8bit"))
        assert low.total_bytes["optimizer_state"] < full.total_bytes["optimizer_state"]
        assert low.total_elements["optimizer_state"] == full.total_elements["optimizer_state"]

    def test_quantized_projector_bytes(self):
        spec = self.small_spec()
        plain = model_report(spec, Strategy(kind="galore", rank=4))
        quant = model_report(spec, Strategy(kind="galore_quant_proj", rank=4, bits=8))
        assert quant.total_bytes["projector"] < plain.total_bytes["projector"]
        assert quant.total_elements["projector"] == plain.total_elements["projector"]

    def test_json_schema(self):
        rep = model_report(self.small_spec(), Strategy(kind="galore", rank=4),
                           Sharding(kind="fsdp", world=2))
        doc = json.loads(rep.to_json())
        assert doc["strategy"]["kind"] == "galore"
        assert doc["sharding"] == {"kind": "fsdp", "world": 2}
        assert {"elements", "bytes", "grand_total_bytes"} <= set(doc["totals"])
        assert len(doc["per_layer"]) == 2

    def test_validation(self):
        with pytest.raises(ParameterError):
            Strategy(kind="mystery")
        with pytest.raises(ParameterError):
            Strategy(kind="galore")  # missing rank
        with pytest.raises(ParameterError):
            Sharding(kind="single", world=2)
        with pytest.raises(ParameterError):
            ModelSpec(name="x", layers=[])
        with pytest.raises(ParameterError):
            LayerShape("x", 0, 4)
        with pytest.raises(ParameterError):
            model_report(self.small_spec(), Strategy(kind="galore", rank=100))
