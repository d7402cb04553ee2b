"""Minimal binary-little-endian PLY reader/writer.

Supports scalar float32/float64/int32/uint8 properties plus a single
(uchar count, int32 items) list property per element, which covers every
profile this package reads or writes (meshes, point clouds, splat
checkpoints).
"""

from __future__ import annotations

import numpy as np

_SCALAR_TYPES = {
    "float": "<f4", "float32": "<f4",
    "double": "<f8", "float64": "<f8",
    "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
    "uchar": "u1", "uint8": "u1",
    "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2",
    "ushort": "<u2", "uint16": "<u2",
}


class PlyParseError(ValueError):
    """Malformed PLY file; message carries the byte offset of the failure."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PlyElement:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.scalar_props = []   # list of (prop_name, numpy dtype string)
        self.list_prop = None    # (prop_name, count_dtype, item_dtype)
        self.data = {}           # prop_name -> array


def read_ply(path):
    """Parse a binary-LE PLY file into {element_name: PlyElement}."""
    with open(path, "rb") as f:
        raw = f.read()

    if not raw.startswith(b"ply"):
        raise PlyParseError("missing 'ply' magic", 0)
    header_end = raw.find(b"end_header\n")
    if header_end < 0:
        raise PlyParseError("missing end_header", len(raw))
    body_start = header_end + len(b"end_header\n")
    header_lines = raw[:header_end].decode("ascii", errors="replace").splitlines()

    elements: list[PlyElement] = []
    comments = []
    fmt_ok = False
    for line in header_lines[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1] != "binary_little_endian":
                raise PlyParseError(f"unsupported format {tok[1]!r}", 4)
            fmt_ok = True
        elif tok[0] == "comment":
            comments.append(line[len("comment "):])
        elif tok[0] == "element":
            elements.append(PlyElement(tok[1], int(tok[2])))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before element", 0)
            el = elements[-1]
            if tok[1] == "list":
                el.list_prop = (tok[4], _SCALAR_TYPES[tok[2]], _SCALAR_TYPES[tok[3]])
            else:
                el.scalar_props.append((tok[2], _SCALAR_TYPES[tok[1]]))
    if not fmt_ok:
        raise PlyParseError("missing format line", 0)

    offset = body_start
    out = {}
    for el in elements:
        if el.list_prop is None:
            dtype = np.dtype([(n, t) for n, t in el.scalar_props])
            nbytes = dtype.itemsize * el.count
            if offset + nbytes > len(raw):
                raise PlyParseError(
                    f"element {el.name!r} truncated: need {nbytes} bytes", offset)
            rec = np.frombuffer(raw, dtype=dtype, count=el.count, offset=offset)
            for n, _ in el.scalar_props:
                el.data[n] = rec[n].copy()
            offset += nbytes
        else:
            if el.scalar_props:
                raise PlyParseError(
                    f"mixed scalar/list element {el.name!r} unsupported", offset)
            name, cnt_t, item_t = el.list_prop
            cnt_dt, item_dt = np.dtype(cnt_t), np.dtype(item_t)
            rows = []
            for _ in range(el.count):
                if offset + cnt_dt.itemsize > len(raw):
                    raise PlyParseError("list count truncated", offset)
                k = int(np.frombuffer(raw, cnt_dt, 1, offset)[0])
                offset += cnt_dt.itemsize
                nbytes = item_dt.itemsize * k
                if offset + nbytes > len(raw):
                    raise PlyParseError("list items truncated", offset)
                rows.append(np.frombuffer(raw, item_dt, k, offset).copy())
                offset += nbytes
            el.data[name] = rows
        out[el.name] = el
    out["__comments__"] = comments
    return out


def write_ply(path, elements, comments=()):
    """Write binary-LE PLY.

    elements: list of (name, props) where props is a dict prop_name -> array.
    A prop named with the special form ("list", count_dtype_name) is not
    supported here; lists are passed as a list-of-arrays value and written
    as (uchar, int32).
    """
    header = ["ply", "format binary_little_endian 1.0"]
    for c in comments:
        header.append(f"comment {c}")
    bodies = []
    for name, props in elements:
        first = next(iter(props.values()))
        count = len(first)
        header.append(f"element {name} {count}")
        list_mode = isinstance(first, list)
        if list_mode:
            (pname, rows), = props.items()
            header.append(f"property list uchar int {pname}")
            chunks = []
            for row in rows:
                row = np.asarray(row, dtype="<i4")
                chunks.append(np.uint8(len(row)).tobytes())
                chunks.append(row.tobytes())
            bodies.append(b"".join(chunks))
        else:
            names = {"float32": "float", "float64": "double", "uint8": "uchar",
                     "int32": "int", "uint32": "uint"}
            cols = []
            dt_fields = []
            for pname, arr in props.items():
                arr = np.asarray(arr)
                if len(arr) != count:
                    raise ValueError("property length mismatch")
                header.append(f"property {names[arr.dtype.name]} {pname}")
                dt_fields.append((pname, arr.dtype.newbyteorder("<")))
                cols.append(arr)
            rec = np.empty(count, dtype=np.dtype(dt_fields))
            for (pname, _), arr in zip(dt_fields, cols):
                rec[pname] = arr
            bodies.append(rec.tobytes())
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        for b in bodies:
            f.write(b)
