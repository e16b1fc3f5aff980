import numpy as np
import pytest

from dynrad.scheduler import (ACTIVATE_DYNAMIC, ADMIT, CREATE_SUBSCENE, DONE,
                              FREEZE_POSES, STAGE_A, STAGE_B, STAGE_C,
                              STOP_ADMISSION, Action, ScheduleConfig,
                              Scheduler, TrainState, lr_schedule,
                              make_ray_batch)


def run_trace(n_frames, span=0.0, cfg=None, max_iters=200_000):
    """Drive a full sub-scene dry run; returns (trace, state)."""
    cfg = cfg or ScheduleConfig()
    sched = Scheduler(cfg, list(range(n_frames)))
    state, actions = sched.start_subscene(0, 0)
    trace = list(actions)
    for _ in range(max_iters):
        acts = sched.tick(state, span)
        trace.extend(acts)
        if any(a.kind in (DONE, CREATE_SUBSCENE) for a in acts):
            break
        state.iteration += 1
    return trace, state


def test_fresh_subscene_starts_with_five_images():
    sched = Scheduler(ScheduleConfig(), list(range(30)))
    state, actions = sched.start_subscene(0, 0)
    assert state.n_images == 5
    assert [a.payload["frame"] for a in actions] == [0, 1, 2, 3, 4]


def test_golden_trace_70_images():
    """70-image run, span never exceeding the limit: admissions at every
    600th iteration, N_refine = 840*70 = 58800, joint/dynamic boundary
    8400 iterations after admission stops, Done at the end."""
    trace, state = run_trace(70)
    admits = [a for a in trace if a.kind == ADMIT]
    assert len(admits) == 70
    # the 65 progressive admissions land at 600, 1200, ..., 39000
    prog = [a.iteration for a in admits if a.iteration > 0]
    assert prog == [600 * k for k in range(1, 66)]
    stop = [a for a in trace if a.kind == STOP_ADMISSION]
    assert len(stop) == 1 and stop[0].iteration == 39000
    assert stop[0].payload["n_refine"] == 58800
    freeze = [a for a in trace if a.kind == FREEZE_POSES]
    act = [a for a in trace if a.kind == ACTIVATE_DYNAMIC]
    assert len(freeze) == 1 and len(act) == 1
    assert freeze[0].iteration == act[0].iteration == 39000 + 8400
    # freeze precedes activate within the same tick
    assert trace.index(freeze[0]) < trace.index(act[0])
    done = [a for a in trace if a.kind == DONE]
    assert len(done) == 1 and done[0].iteration == 39000 + 58800


def test_image_cap_stops_admission_even_with_small_span():
    trace, state = run_trace(100)
    admits = [a for a in trace if a.kind == ADMIT]
    assert len(admits) == 70
    stop = [a for a in trace if a.kind == STOP_ADMISSION][0]
    assert stop.iteration == 600 * 65
    assert stop.payload["n_images"] == 70
    # frames remain, so the sub-scene hands off instead of finishing
    assert [a.kind for a in trace if a.kind in (CREATE_SUBSCENE, DONE)] \
        == [CREATE_SUBSCENE]


def test_span_limit_stops_admission():
    cfg = ScheduleConfig()
    sched = Scheduler(cfg, list(range(50)))
    state, _ = sched.start_subscene(0, 0)
    spans = {600: 1.0, 1200: 5.0}  # exceeds 4 at the second instant
    stopped_at = None
    for _ in range(5000):
        span = spans.get(state.iteration, 1.0 if state.iteration < 1200 else 5.0)
        acts = sched.tick(state, span)
        if any(a.kind == STOP_ADMISSION for a in acts):
            stopped_at = state.iteration
            break
        state.iteration += 1
    assert stopped_at == 1200
    assert state.n_images == 6  # initial 5 plus the single admission at 600


def test_exhausted_images_lead_to_done():
    trace, state = run_trace(30)
    # 25 progressive admissions; admission stops when the 30th is admitted
    stop = [a for a in trace if a.kind == STOP_ADMISSION][0]
    assert stop.iteration == 600 * 25
    assert stop.payload["n_images"] == 30
    assert [a.kind for a in trace][-1] == DONE
    assert state.stage == STAGE_C


def test_stage_transitions_are_monotone():
    cfg = ScheduleConfig(start_images=3, admit_interval=10,
                         iters_per_image=14, max_images=6, overlap=2,
                         joint_divisor=7)
    sched = Scheduler(cfg, list(range(6)))
    state, _ = sched.start_subscene(0, 0)
    seen = [state.stage]
    for _ in range(10_000):
        acts = sched.tick(state, 0.0)
        if state.stage != seen[-1]:
            seen.append(state.stage)
        if any(a.kind in (DONE, CREATE_SUBSCENE) for a in acts):
            break
        state.iteration += 1
    assert seen == [STAGE_A, STAGE_B, STAGE_C]


def test_subscene_overlap_chain_covers_all_frames():
    cfg = ScheduleConfig(start_images=5, admit_interval=10,
                         iters_per_image=14, max_images=12, overlap=4,
                         joint_divisor=7)
    frames = list(range(30))
    sched = Scheduler(cfg, frames)
    state, _ = sched.start_subscene(0, 0)
    ranges = []
    seeds = []
    idx = 0
    for _ in range(100_000):
        acts = sched.tick(state, 0.0)
        handoff = [a for a in acts if a.kind == CREATE_SUBSCENE]
        if handoff:
            ranges.append(list(state.admitted))
            seeds.append(handoff[0].payload["overlap"])
            idx += 1
            state, _ = sched.start_subscene(idx, handoff[0].payload["cursor"],
                                            seed_frames=handoff[0].payload["overlap"])
            continue
        if any(a.kind == DONE for a in acts):
            ranges.append(list(state.admitted))
            break
        state.iteration += 1
    covered = set()
    for r in ranges:
        covered.update(r)
    assert covered == set(frames)
    for prev, seed in zip(ranges, seeds):
        assert seed == prev[-4:]  # exactly min(overlap, available)
    assert len(ranges) >= 2


def test_lr_schedule_values():
    assert lr_schedule("admission", 0, 1) == (1.0, 1.0)
    pose, nerf = lr_schedule("joint", 0, 100)
    assert pose == 1.0 and nerf == 1.0
    pose, nerf = lr_schedule("joint", 100, 100)
    assert abs(pose - 0.1) < 1e-12 and nerf == 1.0
    pose, nerf = lr_schedule("dynamic", 0, 100)
    assert pose == 0.0 and nerf == 1.0
    pose, nerf = lr_schedule("dynamic", 100, 100)
    assert pose == 0.0 and abs(nerf - 0.1) < 1e-12


def test_weight_scales_follow_joint_phase():
    cfg = ScheduleConfig(start_images=2, admit_interval=10,
                         iters_per_image=70, max_images=4, joint_divisor=7)
    sched = Scheduler(cfg, list(range(4)))
    state, _ = sched.start_subscene(0, 0)
    assert sched.weight_scales(state)["flow"] == 1.0
    # drive to the end of admission
    while not state.admission_stopped:
        sched.tick(state, 0.0)
        state.iteration += 1
    state.iteration = state.refine_start + state.n_refine // 7 - 1
    s = sched.weight_scales(state)["flow"]
    assert 0.1 < s < 1.0
    state.iteration = state.refine_start + state.n_refine // 7 + 5
    assert sched.weight_scales(state)["flow"] == 0.1


def test_action_trace_is_deterministic_and_json_serializable():
    t1, _ = run_trace(20)
    t2, _ = run_trace(20)
    assert [a.to_json() for a in t1] == [a.to_json() for a in t2]


class FakeFrame:
    def __init__(self, rng, H, W, with_flow=True):
        self.color = rng.uniform(0, 1, (H, W, 3))
        self.depth = rng.uniform(1, 5, (H, W))
        self.flow_fwd = rng.normal(size=(H, W, 2)) if with_flow else None
        self.flow_bwd = rng.normal(size=(H, W, 2)) if with_flow else None
        self.mask = rng.random((H, W)) < 0.2


class FakeDataset:
    def __init__(self, n=6, H=8, W=8):
        rng = np.random.default_rng(0)
        self.resolution = (H, W)
        self._frames = [FakeFrame(rng, H, W) for _ in range(n)]

    def frame(self, i):
        return self._frames[i]


def test_ray_batch_size_and_membership():
    ds = FakeDataset()
    rng = np.random.default_rng(1)
    batch = make_ray_batch(ds, [0, 1, 2], 4096, rng)
    assert len(batch) == 4096
    assert set(np.unique(batch.frames)) <= {0, 1, 2}
    # frame 2's forward neighbor (3) is not admitted: no forward flow there
    assert not np.any(batch.flow_fwd_valid[batch.frames == 2])
    assert np.all(batch.flow_fwd_valid[batch.frames == 0])


def test_ray_batch_deterministic_given_seed():
    ds = FakeDataset()
    b1 = make_ray_batch(ds, [1, 3, 4], 256, np.random.default_rng(7))
    b2 = make_ray_batch(ds, [1, 3, 4], 256, np.random.default_rng(7))
    assert np.array_equal(b1.frames, b2.frames)
    assert np.array_equal(b1.pixels, b2.pixels)
    assert np.array_equal(b1.colors, b2.colors)


def test_ray_batch_pixels_inside_image():
    ds = FakeDataset(H=4, W=6)
    batch = make_ray_batch(ds, [0, 1], 512, np.random.default_rng(2))
    assert np.all(batch.pixels[:, 0] >= 0) and np.all(batch.pixels[:, 0] < 6)
    assert np.all(batch.pixels[:, 1] >= 0) and np.all(batch.pixels[:, 1] < 4)
