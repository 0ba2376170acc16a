"""Compiled kernels. Import through :mod:`tabprobe.checksum`, which falls back
to pure Python when the extension is not built."""
