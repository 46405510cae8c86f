import socket
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hecad import nn
from hecad import transport as T
from hecad.datasets import SyntheticConfig, synthetic_bundle
from hecad.detectors import LAYERS, ConfidenceRule, TrainedDetector, autoencoder_spec, build_detector

LOCAL = ("127.0.0.1", 0)


def test_hello_frame_is_nine_bytes():
    frame = T.encode(T.WireMessage(T.MsgType.HELLO))
    assert frame == b"HEC1\x01\x00\x00\x00\x00"
    assert T.decode(frame) == T.WireMessage(T.MsgType.HELLO, b"")


def test_header_layout():
    frame = T.encode(T.WireMessage(T.MsgType.PING, b"abc"))
    assert frame[:4] == b"HEC1" and frame[4] == 5
    assert struct.unpack(">I", frame[5:9])[0] == 3


def test_window_round_trip_full_precision():
    data = np.random.default_rng(0).normal(size=(128, 18))
    msg = T.WireMessage.of(T.MsgType.DETECT_REQ, T.window_payload(data, 7))
    wid, back = T.window_from_payload(T.decode(T.encode(msg)).obj())
    assert wid == 7
    np.testing.assert_array_equal(back, data)


@pytest.mark.parametrize("frame,match", [
    (b"XXXX\x01\x00\x00\x00\x00", "bad magic"),
    (b"HEC1\x01\x00", "truncated header"),
    (b"HEC1\x02\x00\x00\x00\x05ab", "truncated payload"),
    (b"HEC1\x09\x00\x00\x00\x00", "unknown message type"),
    (b"HEC1\x02\x01\x00\x00\x01", "exceeds"),
    (b"HEC1\x05\x00\x00\x00\x00z", "trailing"),
])
def test_decode_errors(frame, match):
    with pytest.raises(T.ProtocolError, match=match):
        T.decode(frame)


def test_oversize_encode():
    with pytest.raises(T.ProtocolError):
        T.encode(T.WireMessage(T.MsgType.PING, b"\0" * (T.MAX_PAYLOAD + 1)))


def test_bad_payloads():
    with pytest.raises(T.ProtocolError):
        T.WireMessage(T.MsgType.DETECT_REQ, b"\xff").obj()
    with pytest.raises(T.ProtocolError):
        T.WireMessage(T.MsgType.DETECT_REQ, b"[1]").obj()
    with pytest.raises(T.ProtocolError):
        T.window_from_payload({"id": 0, "dims": [2, 2], "values": [1.0]})


@settings(max_examples=300, deadline=None)
@given(kind=st.sampled_from(list(T.MsgType)), payload=st.binary(max_size=512))
def test_codec_round_trip(kind, payload):
    msg = T.WireMessage(kind, payload)
    frame = T.encode(msg)
    assert len(frame) == T.HEADER_SIZE + len(payload)
    assert T.decode(frame) == msg


def test_node_config_rules():
    with pytest.raises(ValueError, match="upstream"):
        T.NodeConfig("device", LOCAL, "x.json")
    with pytest.raises(ValueError, match="no upstream"):
        T.NodeConfig("cloud", LOCAL, "x.json", ("127.0.0.1", 1))
    with pytest.raises(ValueError):
        T.NodeConfig("fog", LOCAL, "x.json")
    with pytest.raises(ValueError):
        T.NodeConfig("edge", LOCAL, "x.json", ("h", 1), injected_one_way_delay_ms=-1)
    cfg = T.NodeConfig.from_dict({"role": "edge", "listen_addr": ["127.0.0.1", 9000],
                                  "detector_path": "e.json", "upstream_addr": ["127.0.0.1", 9001],
                                  "injected_one_way_delay_ms": 125})
    assert cfg.upstream_addr == ("127.0.0.1", 9001) and cfg.injected_one_way_delay_ms == 125.0


@pytest.fixture(scope="module")
def detectors(tmp_path_factory):
    bundle = synthetic_bundle(SyntheticConfig(kind="univariate", weeks=10, seed=0))
    root = tmp_path_factory.mktemp("det")
    out = {}
    for layer in LAYERS:
        spec = autoencoder_spec(layer, nn.OptimizerConfig("sgd", 0.2, epochs=30, batch_size=16))
        d, _ = build_detector(spec, bundle.ad_train, 0)
        d.save(root / f"{layer}.json")
        out[layer] = d
    return out, root, bundle


def never_sure(d):
    # anomalies are never confident, so the node always escalates them
    return TrainedDetector(d.spec, d.params, d.error_model, ConfidenceRule(1e9, 1.0))


def make_stack(dets, root, edge_delay=0.0, cloud_delay=0.0, lax=False):
    def det(layer):
        return never_sure(dets[layer]) if lax else dets[layer]
    cloud = T.Node(T.NodeConfig("cloud", LOCAL, str(root / "cloud.json"),
                                injected_one_way_delay_ms=cloud_delay), det("cloud")).start()
    edge = T.Node(T.NodeConfig("edge", LOCAL, str(root / "edge.json"), cloud.address, edge_delay),
                  det("edge")).start()
    device = T.Node(T.NodeConfig("device", LOCAL, str(root / "iot.json"), edge.address), det("iot")).start()
    return device, edge, cloud


@pytest.fixture
def stack(detectors):
    dets, root, _ = detectors
    nodes = make_stack(dets, root)
    yield nodes
    for n in nodes:
        n.shutdown()


def test_node_rejects_wrong_detector(detectors):
    dets, root, _ = detectors
    with pytest.raises(ValueError, match="edge"):
        T.Node(T.NodeConfig("edge", LOCAL, "unused", ("127.0.0.1", 1)), dets["cloud"])


def test_ping_and_hello(stack):
    device, edge, _ = stack
    with T.DetectClient(device.address) as c:
        assert c.ping({"n": 3}) == {"n": 3}
    s = socket.create_connection(edge.address)
    T.send_message(s, T.WireMessage.of(T.MsgType.HELLO, {"role": "device"}))
    assert T.read_message(s).obj() == {"role": "edge", "link_delay_ms": 0.0}
    s.close()


def test_confident_normal_needs_no_upstream(stack, detectors):
    device, edge, _ = stack
    _, _, bundle = detectors
    with T.DetectClient(device.address) as c:
        for w in bundle.ad_train[:5]:
            r = c.detect(w)
            assert r.layer == "iot" and r.hops == ["iot"] and r.verdict == 0 and r.confident
    assert device.traffic.upstream_connections == 0 and device.traffic.upstream_requests == 0
    assert edge.traffic.requests == 0


def test_wire_matches_in_process_successive(stack, detectors):
    dets, _, bundle = detectors
    device, _, _ = stack
    rng = np.random.default_rng(1)
    windows = [w.data + rng.normal(0, s, w.data.shape) for w, s in
               zip(bundle.policy_test[:20], rng.uniform(0, 0.6, 20))]
    with T.DetectClient(device.address) as c:
        for i, x in enumerate(windows):
            r = c.detect(x, i)
            ds = [dets[layer].detect(x) for layer in LAYERS]
            k = next((j for j in range(2) if ds[j].confident), 2)
            assert r.window_id == i and r.error is None
            assert (r.verdict, r.layer, r.min_logpd) == (int(ds[k].is_anomaly), LAYERS[k], ds[k].min_logpd)
            assert r.hops == list(LAYERS[:k + 1])
    assert device.traffic.upstream_connections <= 1


def test_keep_alive_one_upstream_per_client(detectors):
    dets, root, bundle = detectors
    nodes = make_stack(dets, root, lax=True)
    device, edge, cloud = nodes
    spike = bundle.ad_train[0].data + 5.0
    try:
        for _ in range(2):
            with T.DetectClient(device.address) as c:
                for i in range(4):
                    r = c.detect(spike, i)
                    assert r.layer == "cloud" and r.hops == ["iot", "edge", "cloud"]
        assert device.traffic.upstream_requests == 8
        assert device.traffic.upstream_connections == 2
        assert edge.traffic.upstream_connections == 2
        assert cloud.traffic.requests == 8
    finally:
        for n in nodes:
            n.shutdown()


def test_injected_delay_on_cloud_path(detectors):
    dets, root, bundle = detectors
    nodes = make_stack(dets, root, edge_delay=125.0, cloud_delay=125.0, lax=True)
    spike = bundle.ad_train[0].data + 5.0
    try:
        with T.DetectClient(nodes[0].address) as c:
            r = c.detect(spike)
        assert r.layer == "cloud" and r.delay_ms >= 500.0
    finally:
        for n in nodes:
            n.shutdown()


def test_loopback_is_fast_without_delay(stack, detectors):
    _, _, bundle = detectors
    with T.DetectClient(stack[0].address) as c:
        c.detect(bundle.ad_train[0])
        r = c.detect(bundle.ad_train[1])
    assert r.delay_ms < 50.0


def test_unreachable_upstream_sets_error_flag(detectors):
    dets, root, bundle = detectors
    probe = socket.socket()
    probe.bind(LOCAL)
    dead = probe.getsockname()
    probe.close()
    device = T.Node(T.NodeConfig("device", LOCAL, "unused", dead, timeout_s=1.0),
                    never_sure(dets["iot"])).start()
    try:
        r = T.client_detect(device.address, bundle.ad_train[0].data + 5.0)
        assert r.layer == "iot" and r.error and "upstream unavailable" in r.error
    finally:
        device.shutdown()


def test_malformed_frame_gets_error_then_reset(stack):
    s = socket.create_connection(stack[2].address, timeout=5)
    s.sendall(b"XXXX\x02\x00\x00\x00\x00")
    reply = T.read_message(s)
    assert reply.msg_type == T.MsgType.ERROR and "magic" in reply.obj()["error"]
    assert T.read_message(s) is None
    s.close()


def test_client_timeout():
    server = socket.socket()
    server.bind(LOCAL)
    server.listen(1)
    try:
        with pytest.raises(TimeoutError):
            with T.DetectClient(server.getsockname(), timeout_s=0.2) as c:
                c.ping()
    finally:
        server.close()


def test_node_config_file_round_trip(tmp_path):
    cfg = T.NodeConfig("edge", ("127.0.0.1", 9100), "e.json", ("127.0.0.1", 9200), 125.0)
    T.write_node_config(tmp_path / "edge.json", cfg)
    import json
    assert T.NodeConfig.from_dict(json.loads((tmp_path / "edge.json").read_text())) == cfg
