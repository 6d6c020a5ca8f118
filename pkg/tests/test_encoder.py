import subprocess
import sys
import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from idlike.encoder import (
    AdapterBackend,
    BackendServer,
    HttpTransport,
    ImageRef,
    TokenSequence,
    image_request,
    make_http_server,
    resize_bilinear,
    split_template,
    text_request,
    toy_backend,
    zero_shot_embeddings,
    zero_shot_tokens,
)
from idlike.errors import (
    BackendUnavailable,
    ConfigError,
    DimensionMismatch,
    GradientUnsupported,
    InvalidImage,
)
from oracles import central_fd, max_rel_err, toy_forward_image


def probe(seed=3, size=8):
    return ImageRef(np.random.default_rng(seed).random((size, size)))


def test_image_determinism_and_norm():
    b = toy_backend(0, 32)
    e1, e2 = b.encode_image(probe()), b.encode_image(probe())
    assert e1.tobytes() == e2.tobytes()
    assert abs(np.linalg.norm(e1) - 1) < 1e-6


def test_one_pixel_change_against_forward_oracle():
    b = toy_backend(0, 32, input_size=8)
    px = np.random.default_rng(5).random((8, 8))
    px2 = px.copy()
    px2[3, 4] = 1.0 - px2[3, 4]
    e1, e2 = b.encode_image(ImageRef(px)), b.encode_image(ImageRef(px2))
    o1, o2 = toy_forward_image(b, px), toy_forward_image(b, px2)
    np.testing.assert_allclose(e1, o1, atol=1e-14)
    np.testing.assert_allclose(e2, o2, atol=1e-14)
    assert float(e1 @ e2) == pytest.approx(float(o1 @ o2), abs=1e-14)
    assert float(e1 @ e2) < 1.0


def test_color_and_crop_inputs():
    b = toy_backend(0, 16, input_size=8)
    rgb = np.random.default_rng(0).random((12, 10, 3))
    crop = ImageRef(rgb, crop_box=(2, 1, 6, 8))
    np.testing.assert_allclose(b.encode_image(crop), toy_forward_image(b, rgb.mean(axis=2)[1:9, 2:8]), atol=1e-14)


def test_all_zero_image_has_an_embedding():
    b = toy_backend(0, 16)
    assert abs(np.linalg.norm(b.encode_image(ImageRef(np.zeros((4, 4))))) - 1) < 1e-12


@pytest.mark.parametrize("pixels,box", [
    (np.full((4, 4), 1.5), None),
    (np.full((4, 4), np.nan), None),
    (np.zeros(4), None),
    (np.zeros((4, 4)), (2, 2, 4, 4)),
])
def test_invalid_images(pixels, box):
    with pytest.raises(InvalidImage):
        ImageRef(pixels, box)


def test_resize_bilinear_preserves_constants_and_identity():
    np.testing.assert_allclose(resize_bilinear(np.full((5, 7), 0.3), 4), np.full((4, 4), 0.3))
    img = np.random.default_rng(0).random((6, 6))
    np.testing.assert_allclose(resize_bilinear(img, 6), img)


def test_zero_token_text_is_reproducible_across_processes():
    b = toy_backend(0, 32)
    emb = b.encode_text(TokenSequence(np.zeros((16, 32))))
    assert abs(np.linalg.norm(emb) - 1) < 1e-6
    code = ("import numpy as np, sys; from idlike.encoder import toy_backend, TokenSequence;"
            "e = toy_backend(0, 32).encode_text(TokenSequence(np.zeros((16, 32))));"
            "sys.stdout.write(e.tobytes().hex())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
    other = np.frombuffer(bytes.fromhex(out), dtype=np.float64)
    np.testing.assert_allclose(other, emb, rtol=0, atol=1e-12)


def jacobian_fd(b, entries, h=1e-4):
    out = np.zeros((b.dim, *entries.shape))
    for idx in np.ndindex(entries.shape):
        e = entries.copy()
        e[idx] += h
        up = b.encode_text(TokenSequence(e))
        e[idx] -= 2 * h
        down = b.encode_text(TokenSequence(e))
        out[(slice(None), *idx)] = (up - down) / (2 * h)
    return out


def test_text_jacobian_matches_fd_100_probes():
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(i)
        b = toy_backend(int(rng.integers(0, 1000)), 8)
        toks = rng.normal(0, 1, (int(rng.integers(1, 5)), 8))
        worst = max(worst, max_rel_err(b.text_jacobian(TokenSequence(toks)), jacobian_fd(b, toks)))
    assert worst < 1e-3


def test_seed7_dim64_passes_fd_check():
    b = toy_backend(7, 64)
    toks = np.random.default_rng(0).normal(0, 1, (3, 64))
    assert max_rel_err(b.text_jacobian(TokenSequence(toks)), jacobian_fd(b, toks)) < 1e-3


def test_vjp_matches_jacobian_contraction(rng):
    b = toy_backend(1, 16)
    toks = TokenSequence(rng.normal(size=(4, 16)))
    g = rng.normal(size=16)
    _, vjp = b.encode_text(toks, with_vjp=True)
    np.testing.assert_allclose(vjp(g), np.einsum("d,dle->le", g, b.text_jacobian(toks)), atol=1e-12)


def test_seed_behaviour():
    px = probe()
    assert toy_backend(7, 64).encode_image(px).tobytes() == toy_backend(7, 64).encode_image(px).tobytes()
    assert not np.allclose(toy_backend(7, 64).encode_image(px), toy_backend(8, 64).encode_image(px))
    assert toy_backend(7, 64).checksum() == toy_backend(7, 64).checksum()


def test_backend_rejects_small_dim_and_is_frozen():
    with pytest.raises(ConfigError):
        toy_backend(0, 4)
    b = toy_backend(0, 8)
    with pytest.raises(ValueError):
        b.w_img[0, 0] = 1.0


def test_text_dim_mismatch():
    with pytest.raises(DimensionMismatch):
        toy_backend(0, 8).encode_text(TokenSequence(np.zeros((2, 9))))


def test_zero_shot_tokens_structure():
    b = toy_backend(0, 16)
    dog = zero_shot_tokens(b, "dog", "a photo of a {}")
    assert len(dog) == 5 and dog.class_slot == 4
    again = zero_shot_tokens(b, "dog", "a photo of a {}")
    assert dog.entries.tobytes() == again.entries.tobytes()
    wolf = zero_shot_tokens(b, "wolf", "a photo of a {}")
    same = [np.array_equal(d, w) for d, w in zip(dog.entries, wolf.entries)]
    assert same == [True, True, True, True, False]
    mid = zero_shot_tokens(b, "dog", "a {} in the grass")
    assert len(mid) == 5 and mid.class_slot == 1


def test_zero_shot_class_name_is_one_token():
    b = toy_backend(0, 16)
    seq = zero_shot_tokens(b, "golden retriever")
    assert len(seq) == 5
    np.testing.assert_array_equal(seq.entries[4], b.class_token("golden retriever"))


@pytest.mark.parametrize("template", ["a photo", "{} and {}"])
def test_template_needs_one_placeholder(template):
    with pytest.raises(ConfigError):
        split_template(template)


def test_zero_shot_embeddings_template_average():
    b = toy_backend(0, 16)
    t1, t2 = "a photo of a {}", "a drawing of a {}"
    e = zero_shot_embeddings(b, ["cat"], [t1, t2])[0]
    avg = b.encode_text(zero_shot_tokens(b, "cat", t1)) + b.encode_text(zero_shot_tokens(b, "cat", t2))
    np.testing.assert_allclose(e, avg / np.linalg.norm(avg), atol=1e-14)


@given(st.integers(0, 2**31 - 1))
def test_embeddings_unit_norm(seed):
    rng = np.random.default_rng(seed)
    b = toy_backend(seed % 5, 8)
    assert abs(np.linalg.norm(b.encode_text(TokenSequence(rng.normal(size=(3, 8))))) - 1) < 1e-6
    assert abs(np.linalg.norm(b.encode_image(ImageRef(rng.random((5, 6))))) - 1) < 1e-6


# adapter protocol

def test_adapter_in_process_round_trip(rng):
    b = toy_backend(2, 16, input_size=8)
    a = AdapterBackend(BackendServer(b).handle)
    assert (a.dim, a.text_context_dim, a.differentiable_text) == (16, 16, True)
    img = probe()
    np.testing.assert_allclose(a.encode_image(img), b.encode_image(img), atol=1e-6)
    toks = TokenSequence(rng.normal(size=(3, 16)))
    np.testing.assert_allclose(a.encode_text(toks), b.encode_text(toks), atol=1e-6)
    g = rng.normal(size=16)
    _, vjp_a = a.encode_text(toks, with_vjp=True)
    _, vjp_b = b.encode_text(toks, with_vjp=True)
    np.testing.assert_allclose(vjp_a(g), vjp_b(g), atol=1e-5)
    np.testing.assert_array_equal(a.token_vectors(["dog"]), b.token_vectors(["dog"]))
    assert a.checksum() == b.checksum()


def test_adapter_over_http():
    b = toy_backend(2, 16, input_size=8)
    server = make_http_server(b)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        host, port = server.server_address
        a = AdapterBackend(HttpTransport(f"http://{host}:{port}/"))
        np.testing.assert_allclose(a.encode_image(probe()), b.encode_image(probe()), atol=1e-6)
    finally:
        server.shutdown()
        server.server_close()


def test_adapter_unreachable():
    with pytest.raises(BackendUnavailable):
        AdapterBackend(HttpTransport("http://127.0.0.1:9/", timeout=2))


def test_adapter_without_gradients():
    b = toy_backend(2, 16)
    server = BackendServer(b)
    info = server.handle({"kind": "info"}) | {"differentiable_text": False}
    a = AdapterBackend(server.handle, info=info)
    with pytest.raises(GradientUnsupported):
        a.encode_text(TokenSequence(np.zeros((2, 16))), with_vjp=True)


def test_server_reports_errors_as_payloads():
    server = BackendServer(toy_backend(2, 16))
    resp = server.handle(text_request(TokenSequence(np.zeros((2, 5)))))
    assert resp["error"]["type"] == "DimensionMismatch"
    assert server.handle({"kind": "nope"})["error"]["type"] == "BackendUnavailable"
    a = AdapterBackend(server.handle)
    with pytest.raises(DimensionMismatch):
        a.encode_text(TokenSequence(np.zeros((2, 5))))


def test_request_schema():
    req = image_request(probe())
    assert req["kind"] == "image" and "pixels" in req["payload"]
    req = text_request(TokenSequence(np.zeros((2, 4)), class_slot=1), want_vjp=True)
    assert req["kind"] == "text" and req["payload"]["class_slot"] == 1 and req["payload"]["want_vjp"]
