import os

import pandas as pd
import streamlit as st
from dotenv import load_dotenv

load_dotenv()

# === Streamlit App Config ===
st.set_page_config(page_title="Focal-CVAE Results", page_icon="🦾")
st.title("🦾 Focal-CVAE Results Viewer")
st.write("Plot the CSV files written by `python -m focalcvae` (train, eval, bench, attn-dump).")

# === Sidebar: result locations ===
st.sidebar.title("📂 Result files")
run_dir = st.sidebar.text_input("Run directory", value=os.environ.get("FOCALCVAE_RUN_DIR", "run"))
loss_path = st.sidebar.text_input("Loss CSV", value=os.path.join(run_dir, "loss.csv"))
eval_path = st.sidebar.text_input("Evaluation CSV", value="eval.csv")
flops_path = st.sidebar.text_input("FLOP report CSV", value=os.path.join("bench", "flops.csv"))
latency_path = st.sidebar.text_input("Latency CSV", value=os.path.join("bench", "latency.csv"))
attention_path = st.sidebar.text_input("Attention dump CSV", value="attention.csv")


@st.cache_data
def load_csv(path: str, mtime: float) -> pd.DataFrame:
    return pd.read_csv(path)


def show(path: str, title: str):
    """Load a CSV or report why it is missing; returns None when unavailable."""
    st.header(title)
    if not os.path.isfile(path):
        st.info(f"No file at `{path}` yet.")
        return None
    try:
        frame = load_csv(path, os.path.getmtime(path))
    except Exception as e:
        st.error(f"❌ Could not read {path}: {e}")
        return None
    if "config_hash" in frame.columns:
        st.caption("config " + ", ".join(sorted(frame["config_hash"].astype(str).unique())))
    return frame


# === Training loss ===
loss = show(loss_path, "📉 Training loss")
if loss is not None:
    st.line_chart(loss.set_index("step")[["total", "reconst", "reg"]])

# === Phase success table ===
table = show(eval_path, "✅ Phase success")
if table is not None:
    columns = [c for c in ("policy", "modality", "degradation", "touched_pct", "lifted_pct", "transferred_pct") if c in table]
    st.dataframe(table[columns], use_container_width=True)

# === FLOPs and latency ===
flops = show(flops_path, "🧮 FLOP report")
if flops is not None:
    totals = flops[flops["group"] == "total"].set_index("model")["flops"]
    st.bar_chart(totals / 1e6)
    st.caption("MFLOP per forward pass, 2 x MAC for matmul/conv, 5 per softmax element")
    with st.expander("Per-group breakdown"):
        st.dataframe(flops, use_container_width=True)

latency = show(latency_path, "⏱️ Latency")
if latency is not None:
    st.dataframe(latency, use_container_width=True)

# === Modality attention shares ===
shares = show(attention_path, "👁️ Attention shares")
if shares is not None:
    episodes = sorted(shares["episode"].unique())
    episode = st.selectbox("Episode", episodes)
    trace = shares[shares["episode"] == episode].set_index("t")
    st.line_chart(trace[["rgb_share", "depth_share"]])
    st.dataframe(shares.groupby("phase")[["rgb_share", "depth_share"]].mean(), use_container_width=True)
    st.success(f"Loaded {len(shares)} steps from {attention_path}")
