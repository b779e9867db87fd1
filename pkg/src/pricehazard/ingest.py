"""CSV ingestion: raw purchase records -> :class:`EventLog`."""
from __future__ import annotations

import csv
import logging
import os
from collections import Counter
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from .core import EventLog
from .exceptions import EmptyDatasetError, SchemaError

log = logging.getLogger(__name__)

ONLINE_RETAIL_COLUMNS = ("InvoiceNo", "StockCode", "Description", "Quantity",
                         "InvoiceDate", "UnitPrice", "CustomerID", "Country")
GENERIC_COLUMNS = ("user", "item", "timestamp", "price")
LOG_COLUMNS = ("user", "item", "time", "price")
LOG_MAGIC = "# pricehazard-log v1"

_DAY = pd.Timedelta(days=1)


@dataclass(frozen=True)
class RawRecord:
    user_raw: str
    item_raw: str
    timestamp: datetime
    price: float


class RecordList(list):
    """A list of :class:`RawRecord` that also carries skip counters."""

    def __init__(self, records=(), skipped=None):
        super().__init__(records)
        self.skipped = Counter() if skipped is None else Counter(skipped)


def _read_header(path) -> list:
    with open(path, newline="", encoding="utf-8-sig") as fh:
        row = next(csv.reader(fh), None)
    return [] if row is None else [c.strip() for c in row]


def _check_columns(path, expected) -> bool:
    """Return False for an empty file, raise SchemaError on a wrong header."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    header = _read_header(path)
    if not header:
        return False
    missing = [c for c in expected if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}", missing)
    return True


def _to_records(df: pd.DataFrame, skipped: Counter) -> RecordList:
    return RecordList(
        (RawRecord(u, o, t.to_pydatetime(), float(p))
         for u, o, t, p in zip(df["user"], df["item"], df["timestamp"], df["price"])),
        skipped,
    )


def _clean_id(s: pd.Series) -> pd.Series:
    s = s.astype("string").str.strip()
    # CustomerID is often exported as a float ("17850.0")
    return s.str.replace(r"\.0$", "", regex=True)


def parse_online_retail(path) -> RecordList:
    """Parse the UCI Online Retail CSV export.

    Each line item with a customer id becomes one record priced
    ``UnitPrice * Quantity``. Returns, cancellations and non-positive unit
    prices are skipped and counted in ``result.skipped``.
    """
    if not _check_columns(path, ONLINE_RETAIL_COLUMNS):
        return RecordList()
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8-sig")
    skipped = Counter()
    cust = _clean_id(df["CustomerID"])
    no_cust = cust.isna() | (cust == "")
    skipped["missing_customer"] = int(no_cust.sum())
    df = df.loc[~no_cust].assign(CustomerID=cust[~no_cust])

    qty = pd.to_numeric(df["Quantity"], errors="coerce")
    unit = pd.to_numeric(df["UnitPrice"], errors="coerce")
    ts = pd.to_datetime(df["InvoiceDate"], errors="coerce", format="mixed")
    bad = qty.isna() | unit.isna() | ts.isna()
    skipped["unparseable"] = int(bad.sum())
    cancel = ~bad & ((qty <= 0) | df["InvoiceNo"].str.startswith("C"))
    skipped["cancelled"] = int(cancel.sum())
    nonpos = ~bad & ~cancel & (unit <= 0)
    skipped["nonpositive_price"] = int(nonpos.sum())
    keep = ~(bad | cancel | nonpos)
    if skipped["unparseable"]:
        log.warning("%s: skipped %d unparseable rows", path, skipped["unparseable"])
    out = pd.DataFrame({
        "user": df["CustomerID"][keep].astype(str),
        "item": df["StockCode"][keep].astype(str).str.strip(),
        "timestamp": ts[keep],
        "price": (qty[keep] * unit[keep]).round(10),
    })
    return _to_records(out, skipped)


def _parse_timestamps(raw: pd.Series) -> pd.Series:
    raw = raw.astype(str).str.strip()
    numeric = pd.to_numeric(raw, errors="coerce")
    is_num = numeric.notna()
    out = pd.Series(pd.NaT, index=raw.index, dtype="datetime64[ns]")
    if is_num.any():
        out[is_num] = pd.to_datetime(numeric[is_num], unit="s")
    if (~is_num).any():
        parsed = pd.to_datetime(raw[~is_num], errors="coerce", utc=True, format="ISO8601")
        out[~is_num] = parsed.dt.tz_localize(None)
    return out


def parse_generic_events(path) -> RecordList:
    """Parse a ``user,item,timestamp,price`` CSV.

    Timestamps may be ISO-8601 or Unix seconds; both are normalised to naive
    UTC datetimes.
    """
    if not _check_columns(path, GENERIC_COLUMNS):
        return RecordList()
    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8-sig")
    if df.empty:
        return RecordList()
    ts = _parse_timestamps(df["timestamp"])
    price = pd.to_numeric(df["price"], errors="coerce")
    bad = ts.isna() | price.isna() | (df["user"].str.strip() == "") | (df["item"].str.strip() == "")
    skipped = Counter(unparseable=int(bad.sum()))
    neg = ~bad & (price < 0)
    skipped["negative_price"] = int(neg.sum())
    if skipped["unparseable"]:
        log.warning("%s: skipped %d unparseable rows", path, skipped["unparseable"])
    keep = ~(bad | neg)
    out = pd.DataFrame({
        "user": df["user"][keep].str.strip(),
        "item": df["item"][keep].str.strip(),
        "timestamp": ts[keep],
        "price": price[keep],
    })
    return _to_records(out, skipped)


def _records_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records.loc[:, ["user", "item", "timestamp", "price"]]
    return pd.DataFrame({
        "user": [r.user_raw for r in records],
        "item": [r.item_raw for r in records],
        "timestamp": pd.to_datetime([r.timestamp for r in records]),
        "price": np.array([r.price for r in records], dtype=float),
    })


def filter_min_degree(df: pd.DataFrame, min_degree: int) -> pd.DataFrame:
    """Drop users and items with fewer than ``min_degree`` events, to a fixed point."""
    if min_degree <= 0:
        return df
    while True:
        uc = df["user"].map(df["user"].value_counts())
        ic = df["item"].map(df["item"].value_counts())
        keep = (uc >= min_degree) & (ic >= min_degree)
        if keep.all():
            return df
        df = df.loc[keep]


def build_event_log(records, window_start, window_end, min_degree: int = 10) -> EventLog:
    """Window, merge, degree-filter and densify raw records into an EventLog.

    Line items of the same user and item at the same instant are merged into
    one event with summed price. Raw identifiers are densified in sorted order.
    """
    start, end = pd.Timestamp(window_start), pd.Timestamp(window_end)
    if not start < end:
        raise ValueError("window_start must precede window_end")
    if min_degree < 0:
        raise ValueError("min_degree must be >= 0")
    df = _records_frame(records)
    df = df.loc[(df["timestamp"] >= start) & (df["timestamp"] <= end)]
    df = (df.groupby(["user", "item", "timestamp"], sort=True, as_index=False)["price"].sum())
    df = filter_min_degree(df, min_degree)
    if df.empty:
        raise EmptyDatasetError("no events left after windowing and degree filtering")
    user_ids = np.sort(df["user"].unique())
    item_ids = np.sort(df["item"].unique())
    users = np.searchsorted(user_ids, df["user"].to_numpy())
    items = np.searchsorted(item_ids, df["item"].to_numpy())
    times = ((df["timestamp"] - start) / _DAY).to_numpy(dtype=float)
    return EventLog(users, items, times, df["price"].to_numpy(dtype=float),
                    (end - start) / _DAY, len(user_ids), len(item_ids),
                    tuple(map(str, user_ids)), tuple(map(str, item_ids)))


def dataset_statistics(log_: EventLog) -> dict:
    active_u = int(np.count_nonzero(log_.user_event_counts()))
    active_o = int(np.count_nonzero(log_.item_event_counts()))
    return {"users": active_u, "items": active_o, "purchases": len(log_),
            "span_days": float(log_.t_end)}


def write_statistics_csv(log_: EventLog, path) -> None:
    stats = dataset_statistics(log_)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(stats))
        w.writeheader()
        w.writerow(stats)


# --- event-log files -----------------------------------------------------

def write_event_log(log_: EventLog, path) -> None:
    """Write a log with raw identifiers and day offsets.

    The first line is a comment carrying ``t_end``; floats use ``repr`` so a
    round trip is exact.
    """
    with open(path, "w", newline="") as fh:
        fh.write(f"{LOG_MAGIC} t_end={log_.t_end!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        uid, iid = log_.user_ids, log_.item_ids
        for u, o, t, p in zip(log_.users, log_.items, log_.times, log_.prices):
            w.writerow((uid[u], iid[o], repr(float(t)), repr(float(p))))


def read_event_log(path, user_ids: Optional[Iterable[str]] = None,
                   item_ids: Optional[Iterable[str]] = None) -> EventLog:
    """Read a log written by :func:`write_event_log`.

    With ``user_ids`` / ``item_ids`` given, the events are mapped into that
    index space and rows with unknown identifiers are dropped.
    """
    with open(path, newline="") as fh:
        first = fh.readline()
        if not first.startswith(LOG_MAGIC):
            raise SchemaError(f"{path}: not an event-log file (missing '{LOG_MAGIC}' line)")
        try:
            t_end = float(first.split("t_end=")[1])
        except (IndexError, ValueError):
            raise SchemaError(f"{path}: malformed t_end in header") from None
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LOG_COLUMNS:
        raise SchemaError(f"{path}: expected columns {LOG_COLUMNS}", LOG_COLUMNS)
    rows = rows[1:]
    raw_u = [r[0] for r in rows]
    raw_o = [r[1] for r in rows]
    times = np.array([float(r[2]) for r in rows])
    prices = np.array([float(r[3]) for r in rows])
    if user_ids is None:
        user_ids = sorted(set(raw_u))
    if item_ids is None:
        item_ids = sorted(set(raw_o))
    umap = {u: i for i, u in enumerate(user_ids)}
    omap = {o: i for i, o in enumerate(item_ids)}
    keep = np.array([u in umap and o in omap for u, o in zip(raw_u, raw_o)], dtype=bool)
    users = np.array([umap.get(u, -1) for u in raw_u], dtype=np.int64)[keep] if rows else []
    items = np.array([omap.get(o, -1) for o in raw_o], dtype=np.int64)[keep] if rows else []
    if rows:
        times, prices = times[keep], prices[keep]
    return EventLog(users, items, times, prices, t_end, len(umap), len(omap),
                    tuple(user_ids), tuple(item_ids))
