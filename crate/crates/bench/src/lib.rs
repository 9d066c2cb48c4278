//! Benchmarks for the slotforge workspace live under `benches/`.
