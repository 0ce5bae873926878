"""Deterministic single-file checkpoints.

The file is an ``.npz``-compatible zip archive: a ``meta.json`` member with
configs, freeze flags and step counts, plus one ``.npy`` member per tensor
(value and both AdamW moments).  Member timestamps are pinned so equal
contents give byte-identical files.
"""

import io
import json
import zipfile

import numpy as np

from .decoder import DecoderModel, GeminiConfig
from .encoder import Encoder, EncoderConfig
from .numeric import ParamEntry, ParamStore

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


def _member(zf, name, payload):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_stores(path, stores, meta):
    """Write ``{store_name: ParamStore}`` plus a JSON-serialisable ``meta`` dict."""
    layout = {}
    with zipfile.ZipFile(path, "w") as zf:
        for sname, store in stores.items():
            layout[sname] = []
            for name, e in store.entries.items():
                layout[sname].append({"name": name, "frozen": e.frozen, "step": e.step})
                for part in ("value", "m", "v"):
                    _member(zf, f"{sname}/{name}/{part}.npy", _npy_bytes(getattr(e, part)))
        doc = {"format": FORMAT_VERSION, "meta": meta, "stores": layout}
        _member(zf, "meta.json", json.dumps(doc, sort_keys=True, indent=1).encode("utf-8"))


def load_stores(path):
    with zipfile.ZipFile(path) as zf:
        doc = json.loads(zf.read("meta.json").decode("utf-8"))
        if doc.get("format") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
        stores = {}
        for sname, entries in doc["stores"].items():
            store = ParamStore()
            for info in entries:
                name = info["name"]
                parts = {
                    part: np.lib.format.read_array(io.BytesIO(zf.read(f"{sname}/{name}/{part}.npy")))
                    for part in ("value", "m", "v")
                }
                store.entries[name] = ParamEntry(
                    value=parts["value"],
                    grad=np.zeros_like(parts["value"]),
                    frozen=bool(info["frozen"]),
                    m=parts["m"],
                    v=parts["v"],
                    step=int(info["step"]),
                )
            stores[sname] = store
    return stores, doc["meta"]


def save_model(path, model, encoder=None, tokenizer=None, extra=None):
    meta = {
        "fusion": model.fusion,
        "decoder_config": model.cfg.to_dict(),
        "encoder_config": encoder.cfg.to_dict() if encoder is not None else None,
        "tokenizer": tokenizer.to_dict() if tokenizer is not None else None,
        "extra": extra or {},
    }
    stores = {"decoder": model.store}
    if encoder is not None:
        stores["encoder"] = encoder.store
    save_stores(path, stores, meta)


def load_model(path):
    """Returns ``(model, encoder_or_None, tokenizer_dict_or_None, extra)``."""
    stores, meta = load_stores(path)
    model = DecoderModel(GeminiConfig(**meta["decoder_config"]), stores["decoder"], meta["fusion"])
    encoder = None
    if meta["encoder_config"] is not None:
        encoder = Encoder(EncoderConfig(**meta["encoder_config"]), stores["encoder"])
    return model, encoder, meta["tokenizer"], meta["extra"]
