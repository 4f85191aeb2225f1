import random

import pytest

from consensus_sim import CONFIG, DEVICE, NODES, Scenario, check_safety, explore, header
from vidledger.consensus import ConsensusError, ConsensusInstance, ConsensusMessage
from vidledger.encoding import DecodeError
from vidledger.identity import generate_identity
from vidledger.quorum import ConsensusConfig, Phase


def instances():
    return [ConsensusInstance(CONFIG, n, DEVICE) for n in NODES]


def run_to_completion(nodes, initial, drop=lambda dst, m: False):
    """Deliver FIFO until quiet. Returns {node index: Decision}."""
    queue = [(dst, m) for m in initial for dst in range(len(nodes)) if dst != 0]
    decisions = {}
    while queue:
        dst, m = queue.pop(0)
        if drop(dst, m):
            continue
        out, d = nodes[dst].step(m)
        if d is not None:
            decisions[dst] = d
        queue += [(o, x) for x in out for o in range(len(nodes)) if o != dst]
    return decisions


def test_propose_emits_signed_pre_prepare():
    node = ConsensusInstance(CONFIG, NODES[0], DEVICE)
    out = node.propose(header(0))
    assert [m.phase for m in out] == [Phase.PRE_PREPARE]
    assert out[0].signature_valid()
    assert out[0].proposed_header == header(0)
    with pytest.raises(ConsensusError):
        node.propose(header(1))


def test_propose_requires_managing_gateway():
    node = ConsensusInstance(CONFIG, NODES[1], DEVICE)
    with pytest.raises(ConsensusError):
        node.propose(header(0))


def test_non_member_cannot_run_an_instance():
    outsider = generate_identity(bytes(32))
    with pytest.raises(ConsensusError):
        ConsensusInstance(CONFIG, outsider, DEVICE)


def test_config_rejects_too_few_peers():
    with pytest.raises(ValueError):
        ConsensusConfig(tuple(n.public_key for n in NODES[:3]), f=1)


def test_all_honest_nodes_decide_with_full_certificate():
    nodes = instances()
    decisions = run_to_completion(nodes, nodes[0].propose(header(0)))
    assert all(n.decided == header(0) for n in nodes)
    assert set(decisions) == {0, 1, 2, 3}
    for d in decisions.values():
        signers = {e.signer for e in d.certificate}
        assert len(signers) >= 3
        assert all(e.valid_for(header(0).header_hash) for e in d.certificate)


def test_decision_needs_three_commits():
    node = ConsensusInstance(CONFIG, NODES[1], DEVICE)
    h = header(0)
    pp = ConsensusMessage.create(Phase.PRE_PREPARE, h.header_hash, NODES[0], DEVICE, h)
    out, d = node.step(pp)
    assert [m.phase for m in out] == [Phase.PREPARE] and d is None
    out, d = node.step(ConsensusMessage.create(Phase.PREPARE, h.header_hash, NODES[2], DEVICE))
    assert [m.phase for m in out] == [Phase.COMMIT] and d is None
    _, d = node.step(ConsensusMessage.create(Phase.COMMIT, h.header_hash, NODES[0], DEVICE))
    assert d is None
    _, d = node.step(ConsensusMessage.create(Phase.COMMIT, h.header_hash, NODES[2], DEVICE))
    assert d is not None and d.header == h
    assert len(d.certificate) == 3


def test_duplicate_vote_is_not_counted_twice():
    node = ConsensusInstance(CONFIG, NODES[1], DEVICE)
    h = header(0)
    node.step(ConsensusMessage.create(Phase.PRE_PREPARE, h.header_hash, NODES[0], DEVICE, h))
    vote = ConsensusMessage.create(Phase.COMMIT, h.header_hash, NODES[3], DEVICE)
    node.step(vote)
    node.step(vote)
    assert len(node.commit_votes[h.header_hash]) == 1
    assert node.ignored == 1


def test_forged_and_foreign_messages_are_rejected():
    node = ConsensusInstance(CONFIG, NODES[1], DEVICE)
    h = header(0)
    good = ConsensusMessage.create(Phase.PREPARE, h.header_hash, NODES[2], DEVICE)
    forged = ConsensusMessage(good.phase, good.device_public_key, good.header_hash,
                              good.sender, bytes(64))
    outsider = ConsensusMessage.create(Phase.PREPARE, h.header_hash,
                                       generate_identity(bytes(32)), DEVICE)
    other_device = ConsensusMessage.create(Phase.PREPARE, h.header_hash, NODES[2], bytes(32))
    # A PRE_PREPARE from someone other than the header's managing gateway.
    hijack = ConsensusMessage.create(Phase.PRE_PREPARE, h.header_hash, NODES[2], DEVICE, h)
    for m in (forged, outsider, other_device, hijack):
        assert node.step(m) == ([], None)
    assert node.rejected == 4
    assert node.proposal is None


def test_accept_veto_prevents_prepare():
    node = ConsensusInstance(CONFIG, NODES[1], DEVICE, accept=lambda hdr: False)
    h = header(0)
    out, _ = node.step(ConsensusMessage.create(Phase.PRE_PREPARE, h.header_hash, NODES[0], DEVICE, h))
    assert out == [] and node.proposal is None


def test_message_round_trip():
    h = header(3)
    for m in (ConsensusMessage.create(Phase.PRE_PREPARE, h.header_hash, NODES[0], DEVICE, h),
              ConsensusMessage.create(Phase.COMMIT, h.header_hash, NODES[2], DEVICE)):
        back = ConsensusMessage.decode(m.encode())
        assert back == m and back.signature_valid()
    with pytest.raises(DecodeError):
        ConsensusMessage.decode(m.encode()[:-1])


def test_one_crashed_peer_still_decides():
    nodes = instances()
    run_to_completion(nodes, nodes[0].propose(header(0)), drop=lambda dst, m: dst == 3)
    assert [n.decided for n in nodes[:3]] == [header(0)] * 3


def test_two_crashed_peers_block_progress():
    nodes = instances()
    run_to_completion(nodes, nodes[0].propose(header(0)), drop=lambda dst, m: dst in (2, 3))
    assert all(n.decided is None for n in nodes)


@pytest.mark.parametrize("scenario", [
    dict(crashed=(3,)),
    dict(equivocate=True, crashed=(3,), split=((1,), (2,))),
], ids=["crash", "equivocate+crash"])
def test_exhaustive_interleavings_are_safe(scenario):
    steps, states = explore(Scenario(**scenario))
    assert steps > 0 and states > 0


@pytest.mark.parametrize("split", [((1,), (2, 3)), ((1, 2), (2, 3)), ((1, 2, 3), ())])
def test_equivocation_random_schedules(split):
    rng = random.Random(hash(split) & 0xFFFF)
    decided_any = False
    for _ in range(150):
        s = Scenario(equivocate=True, split=split)
        s.run_random(rng)
        check_safety(s)
        decided_any |= bool(s.decisions)
    if split == ((1, 2, 3), ()):
        assert decided_any


def test_honest_liveness_under_random_schedules():
    rng = random.Random(11)
    for _ in range(100):
        s = Scenario()
        s.run_random(rng)
        check_safety(s)
        assert len(s.decisions) == 4  # the proposer decides too
