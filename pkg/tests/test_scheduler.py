from fractions import Fraction

import numpy as np
import pytest

from app.services.duplex import (
    Variant,
    dudnn_backward,
    dudnn_forward,
    head_backward,
    make_spec,
    softmax_cross_entropy,
)
from app.services.scheduler import (
    AccessTrace,
    ConvDims,
    Instruction,
    LatencyModel,
    LayerDims,
    Opcode,
    Preload,
    Schedule,
    ScheduleError,
    TraceEvent,
    closed_form_lifetimes,
    dependency_graph,
    emit_backward_schedule,
    emit_forward_schedule,
    emit_training_schedule,
    layer_dims,
    measure_lifetimes,
    measured_lifetimes,
    op_workload,
    order_schedule,
    parse_schedule_text,
    peak_memory,
    replay_schedule,
    schedule_to_text,
    simulate_trace,
    tensor_bytes,
    validate_schedule,
)
from app.services.systolic import ArrayConfig, conv_job, cycles


def _spec(num_blocks=3, variant=Variant.DUDNN, seed=0):
    return make_spec(in_channels=1, image_size=8, num_blocks=num_blocks, backbone_channels=4,
                     branch_channels=4, num_classes=3, variant=variant, seed=seed)


def _uniform_dims(num_layers, batch=8):
    conv = ConvDims(4, 4, 4, 4, 3)
    return [LayerDims(batch, conv, conv, conv) for _ in range(num_layers)]


def _random_dims(rng, num_layers):
    dims = []
    for _ in range(num_layers):
        def conv():
            return ConvDims(int(rng.integers(1, 9)), int(rng.integers(1, 9)),
                            int(rng.integers(1, 9)), int(rng.integers(1, 9)),
                            int(rng.choice([1, 3, 5])))
        dims.append(LayerDims(int(rng.integers(1, 17)), conv(), conv(), conv()))
    return dims


UNIT = LatencyModel(fixed_time=Fraction(1))


class TestEmission:
    def test_dudnn_forward_opcodes(self):
        schedule = emit_forward_schedule(_spec(num_blocks=1))
        assert schedule.opcodes() == [
            "POOL", "POOL", "CONV_G", "RELU", "CONV_F1", "RELU", "ADD",
            "CONV_F2", "RELU", "ADD", "POOL", "ADD",
        ]
        assert schedule.forward_length == 12

    def test_dudnn_backward_opcodes(self):
        schedule = emit_training_schedule(_spec(num_blocks=1))
        backward = schedule.opcodes()[schedule.forward_length:]
        assert backward == [
            "ADD", "RECOMPUTE_F2", "RELU", "ADD", "INVGRAD_U2A", "ADD", "WGRAD_U2W",
            "RECOMPUTE_F1", "RELU", "ADD", "INVGRAD_U1A", "ADD", "WGRAD_U1W",
        ]

    def test_injection_added_before_next_block(self):
        schedule = emit_forward_schedule(_spec(num_blocks=2))
        add = next(i for i in schedule.instructions if i.output == "y2.2")
        assert add.inputs == ("y2.1", "u.1", "f1.2")
        assert add.overwrite == "y2.1"

    @pytest.mark.parametrize("variant", list(Variant))
    def test_every_variant_is_valid(self, variant):
        schedule = emit_training_schedule(_spec(num_blocks=4, variant=variant))
        validate_schedule(schedule)
        outputs = [i.output for i in schedule.instructions]
        assert len(outputs) == len(set(outputs))
        assert {"q1.1", "q2.1", "q1.4", "q2.4"} <= set(outputs)

    def test_reversible_variants_reuse_buffers(self):
        small = emit_training_schedule(_spec(num_blocks=2))
        large = emit_training_schedule(_spec(num_blocks=8))
        assert set(small.buffer_kinds) - small.static_buffers == set(large.buffer_kinds) - large.static_buffers

    def test_fi_stores_per_layer(self):
        schedule = emit_training_schedule(_spec(num_blocks=3, variant=Variant.FI))
        stored = [b for b, (kind, _) in schedule.buffer_kinds.items() if kind == "stored"]
        assert {"x1_1", "y2_3", "f1_2", "f2_3"} <= set(stored)
        assert not any(i.opcode.value.startswith("RECOMPUTE") for i in schedule.instructions)

    def test_ca_runs_backbone_before_stem(self):
        schedule = emit_forward_schedule(_spec(num_blocks=2, variant=Variant.CA))
        assert schedule.opcodes()[:5] == ["CONV_G", "RELU", "CONV_G", "RELU", "POOL"]
        assert schedule.instructions[4].inputs == ("z.2",)

    def test_bo_has_no_backbone(self):
        schedule = emit_training_schedule(_spec(num_blocks=2, variant=Variant.BO))
        assert Opcode.CONV_G not in {i.opcode for i in schedule.instructions}

    def test_backward_alone_preloads_forward_values(self):
        schedule = emit_backward_schedule(_spec(num_blocks=2))
        labels = {p.label for p in schedule.preloads}
        assert labels == {"x2.3", "x1.3", "u.1", "u.2", "g1.2", "g2.2"}
        assert schedule.forward_length == 0
        assert schedule.opcodes()[0] == "ADD"


class TestValidation:
    def _broken(self):
        schedule = Schedule(Variant.DUDNN, 1, buffer_kinds={"b": ("stream", 0), "c": ("scratch", 0)})
        schedule.preloads.append(Preload("v", "b", 0))
        schedule.instructions.append(Instruction(Opcode.RELU, ("v",), "w", "b", 1, "v"))
        schedule.instructions.append(Instruction(Opcode.RELU, ("v",), "x", "c", 1, None))
        return schedule

    def test_read_after_overwrite(self):
        with pytest.raises(ScheduleError, match="after it was overwritten"):
            validate_schedule(self._broken())

    def test_ordering_rejects_read_after_overwrite(self):
        with pytest.raises(ScheduleError, match="before a dependency"):
            order_schedule(self._broken())

    def test_read_before_write(self):
        schedule = Schedule(Variant.DUDNN, 1, buffer_kinds={"b": ("stream", 0)})
        schedule.instructions.append(Instruction(Opcode.RELU, ("v",), "w", "b", 1))
        with pytest.raises(ScheduleError, match="before it is written"):
            validate_schedule(schedule)

    def test_wrong_overwrite_declaration(self):
        schedule = Schedule(Variant.DUDNN, 1, buffer_kinds={"b": ("stream", 0)})
        schedule.preloads.append(Preload("v", "b", 0))
        schedule.instructions.append(Instruction(Opcode.RELU, ("v",), "w", "b", 1, None))
        with pytest.raises(ScheduleError, match="declares None"):
            validate_schedule(schedule)

    def test_undeclared_buffer(self):
        schedule = Schedule(Variant.DUDNN, 1)
        schedule.preloads.append(Preload("v", "b", 0))
        with pytest.raises(ScheduleError, match="not declared"):
            validate_schedule(schedule)

    def test_dependency_graph_is_acyclic(self):
        graph = dependency_graph(emit_training_schedule(_spec(num_blocks=3)))
        kinds = {d["kind"] for _, _, d in graph.edges(data=True)}
        assert kinds == {"data", "overwrite"}
        assert all(u < v for u, v in graph.edges)


class TestReplay:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_matches_reference_passes(self, variant):
        spec = _spec(num_blocks=3, variant=variant, seed=4)
        rng = np.random.default_rng(1)
        spec.head_weight[...] = rng.normal(size=spec.head_weight.shape)
        batch = rng.normal(size=(4, 1, 8, 8))
        labels = rng.integers(0, 3, size=4)

        logits, state = dudnn_forward(spec, batch)
        _, dlogits = softmax_cross_entropy(logits, labels)
        grads = dudnn_backward(spec, state, dlogits)
        _, g1, g2 = head_backward(spec, state, dlogits)

        values = replay_schedule(emit_training_schedule(spec), spec,
                                 {"z.0": batch, "g1.3": g1, "g2.3": g2})
        final_y2 = "x2.4" if variant in (Variant.DUDNN, Variant.FI) else "y2.3"
        assert np.allclose(values["x1.4"], state.y1, atol=1e-10)
        assert np.allclose(values[final_y2], state.y2, atol=1e-10)
        for l in range(1, 4):
            assert np.allclose(values[f"q1.{l}"], grads[f"branch.{l}.f1.weight"], atol=1e-10)
            assert np.allclose(values[f"q2.{l}"], grads[f"branch.{l}.f2.weight"], atol=1e-10)

    def test_recovered_inputs_match_forward(self):
        spec = _spec(num_blocks=2, seed=2)
        rng = np.random.default_rng(3)
        spec.head_weight[...] = rng.normal(size=spec.head_weight.shape)
        batch = rng.normal(size=(2, 1, 8, 8))
        logits, state = dudnn_forward(spec, batch)
        _, dlogits = softmax_cross_entropy(logits, np.array([0, 1]))
        _, g1, g2 = head_backward(spec, state, dlogits)
        values = replay_schedule(emit_training_schedule(spec), spec,
                                 {"z.0": batch, "g1.2": g1, "g2.2": g2})
        assert np.allclose(values["rx1.1"], values["x1.1"], atol=1e-10)
        assert np.allclose(values["rx2.1"], values["x2.1"], atol=1e-10)

    def test_missing_preload(self):
        spec = _spec(num_blocks=1)
        with pytest.raises(ScheduleError, match="no value supplied"):
            replay_schedule(emit_training_schedule(spec), spec, {})

    def test_model_mismatch(self):
        with pytest.raises(ScheduleError, match="different model"):
            replay_schedule(emit_training_schedule(_spec(num_blocks=2)), _spec(num_blocks=3), {})

    def test_branch_norm_rejected(self):
        spec = make_spec(num_blocks=1, branch_norm=True)
        with pytest.raises(ScheduleError, match="batch-normalized"):
            replay_schedule(emit_training_schedule(spec), spec, {})


class TestWorkload:
    def test_op_workload(self):
        layer = _uniform_dims(1)[0]
        assert op_workload(layer, "F1") == 8 * 4 * 4 * 4 * 9 == 4608
        assert op_workload(layer, "F1", "full") == 4 * 4608

    def test_unknown_convention(self):
        with pytest.raises(ValueError, match="MAC convention"):
            op_workload(_uniform_dims(1)[0], "F1", "half")

    def test_layer_dims_from_spec(self):
        dims = layer_dims(_spec(num_blocks=2), batch=8)
        assert dims[0].g == ConvDims(1, 4, 8, 8, 3)
        assert dims[1].f2 == ConvDims(4, 4, 4, 4, 3)
        assert layer_dims(_spec(num_blocks=2, variant=Variant.BO), 8)[0].g is None

    def test_analytical_latency_is_exact(self):
        latency = LatencyModel(macs_per_cycle=324)
        layer = _uniform_dims(1)[0]
        assert latency.op_time(Opcode.CONV_F1, layer) == Fraction(4608, 324)
        assert latency.op_time(Opcode.ADD, layer) == 0

    def test_detailed_latency_uses_array(self):
        array = ArrayConfig(rows=4, cols=4)
        latency = LatencyModel.from_array(array, mode="detailed")
        layer = _uniform_dims(1)[0]
        expected = cycles(conv_job(8, 4, 4, 4, 4, 3, "weight_grad", 9), array, "detailed")
        assert latency.op_time(Opcode.WGRAD_U2W, layer) == expected

    def test_detailed_needs_array(self):
        with pytest.raises(ValueError, match="array configuration"):
            LatencyModel(mode="detailed")

    def test_to_us(self):
        assert LatencyModel(clock_hz=5e8).to_us(Fraction(500)) == pytest.approx(1.0)


class TestTrace:
    def test_event_count(self):
        schedule = emit_training_schedule(_spec(num_blocks=3))
        trace = simulate_trace(schedule, UNIT, _uniform_dims(3))
        assert len(trace.events) == sum(len(i.inputs) + 1 for i in schedule.instructions)
        assert all(a.time <= b.time for a, b in zip(trace.events, trace.events[1:]))

    def test_hand_built_trace(self):
        events = [
            TraceEvent(Fraction(0), "W", "b", "v", 0),
            TraceEvent(Fraction(1), "R", "b", "v", 1),
            TraceEvent(Fraction(5), "R", "b", "v", 2),
            TraceEvent(Fraction(6), "W", "b", "w", 3),
            TraceEvent(Fraction(7), "R", "b", "w", 4),
        ]
        assert measured_lifetimes(AccessTrace(events)) == {"b": 5}

    def test_read_of_overwritten_value(self):
        events = [
            TraceEvent(Fraction(0), "W", "b", "v", 0),
            TraceEvent(Fraction(1), "W", "b", "w", 1),
            TraceEvent(Fraction(2), "R", "b", "v", 2),
        ]
        with pytest.raises(ScheduleError, match="before it was written"):
            measured_lifetimes(AccessTrace(events))

    def test_dims_must_cover_layers(self):
        with pytest.raises(ScheduleError, match="layer dims"):
            simulate_trace(emit_training_schedule(_spec(num_blocks=3)), UNIT, _uniform_dims(2))


class TestLifetimes:
    def test_printed_uniform_values(self):
        report = closed_form_lifetimes(_uniform_dims(4), UNIT, "printed")
        assert report.components["f_y2"][2] == 4
        assert report.components["b_g1"][2] == 5

    def test_schedule_uniform_values(self):
        report = closed_form_lifetimes(_uniform_dims(4), UNIT)
        assert report.t_f == 4
        assert report.t_b == 6
        assert report.t_data == 6

    def test_trace_matches_closed_form(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            num_layers = int(rng.integers(1, 6))
            dims = _random_dims(rng, num_layers)
            latency = LatencyModel(macs_per_cycle=int(rng.integers(1, 400)))
            schedule = emit_training_schedule(_spec(num_blocks=num_layers))
            measured = measure_lifetimes(schedule, simulate_trace(schedule, latency, dims))
            expected = closed_form_lifetimes(dims, latency)
            assert measured.components == expected.components, trial
            assert (measured.t_f, measured.t_b) == (expected.t_f, expected.t_b), trial

    def test_doubling_throughput_halves_lifetimes(self):
        schedule = emit_training_schedule(_spec(num_blocks=3))
        dims = _uniform_dims(3)
        slow = measure_lifetimes(schedule, simulate_trace(schedule, LatencyModel(324), dims))
        fast = measure_lifetimes(schedule, simulate_trace(schedule, LatencyModel(648), dims))
        assert fast.t_data * 2 == slow.t_data
        assert {b: 2 * v for b, v in fast.per_buffer.items()} == slow.per_buffer

    def test_fi_outlives_dudnn(self):
        dims = _uniform_dims(4)
        dudnn = emit_training_schedule(_spec(num_blocks=4))
        fi = emit_training_schedule(_spec(num_blocks=4, variant=Variant.FI))
        t_dudnn = measure_lifetimes(dudnn, simulate_trace(dudnn, UNIT, dims)).t_data
        t_fi = measure_lifetimes(fi, simulate_trace(fi, UNIT, dims)).t_data
        assert t_fi > 3 * t_dudnn

    def test_closed_form_needs_backbone(self):
        conv = ConvDims(4, 4, 4, 4, 3)
        with pytest.raises(ScheduleError, match="no G operator"):
            closed_form_lifetimes([LayerDims(1, conv, conv)], UNIT)

    def test_report_to_dict(self):
        report = closed_form_lifetimes(_uniform_dims(2), UNIT)
        data = report.to_dict()
        assert data["t_data"] == 6.0
        assert data["components"]["b_y2"] == {"1": 4.0, "2": 4.0}


class TestPeakMemory:
    def _peak(self, num_layers, variant):
        spec = _spec(num_blocks=num_layers, variant=variant)
        schedule = emit_training_schedule(spec)
        return peak_memory(schedule, tensor_bytes(schedule, spec, batch=8))

    def test_reversible_peak_is_depth_independent(self):
        peaks = {self._peak(n, Variant.DUDNN) for n in (2, 4, 8)}
        assert len(peaks) == 1

    def test_stored_peak_grows_with_depth(self):
        depths = np.array([2, 4, 8])
        peaks = np.array([self._peak(n, Variant.FI) for n in depths])
        assert peaks[0] < peaks[1] < peaks[2]
        slope, intercept = np.polyfit(depths, peaks, 1)
        residual = np.sum((peaks - (slope * depths + intercept)) ** 2)
        total = np.sum((peaks - peaks.mean()) ** 2)
        assert 1.0 - residual / total >= 0.99
        branch_tensor = 8 * 4 * 4 * 4 * 8.0
        assert peaks[2] >= 4 * 8 * branch_tensor

    def test_missing_size(self):
        with pytest.raises(ScheduleError, match="no size"):
            peak_memory(emit_training_schedule(_spec(num_blocks=1)), {})


class TestTextForm:
    @pytest.mark.parametrize("variant", [Variant.DUDNN, Variant.FI])
    def test_round_trip(self, variant):
        schedule = emit_training_schedule(_spec(num_blocks=2, variant=variant))
        assert parse_schedule_text(schedule_to_text(schedule)) == schedule

    def test_line_format(self):
        text = schedule_to_text(emit_forward_schedule(_spec(num_blocks=2)))
        assert "ADD 2 y2.1,u.1,f1.2 -> y2.2 @x2 !y2.1" in text.splitlines()

    def test_bad_line(self):
        with pytest.raises(ScheduleError, match="line 4"):
            parse_schedule_text("variant DuDNN\nlayers 1\nforward 0\nADD 1 a -> \n")
