"""Builder for the five-package mini-container used across the test suite.

Two APT packages (with Depends, alternatives, and Provides), two PIP
dist-info packages, and one Conda package, plus non-package files and a
symlinked entrypoint. All content is fixed byte-for-byte so the pipeline
output is reproducible.
"""

from __future__ import annotations

import json
import os
import pathlib

DPKG_STATUS = """\
Package: liba
Status: install ok installed
Version: 1.0
Architecture: amd64
Depends: virtual-b, nosuchpkg | libb, ghostpkg
Description: fixture library A
 Uses a virtual dependency and an alternative group.

Package: libb
Status: install ok installed
Version: 2.0
Architecture: amd64
Provides: virtual-b
Description: fixture library B

Package: libz
Status: deinstall ok config-files
Version: 0.9
Architecture: amd64
Description: removed package kept only as config-files
"""

LIBA_LIST = """\
/.
/usr
/usr/bin
/usr/bin/widget
/usr/lib
/usr/lib/liba
/usr/lib/liba/liba.so
/usr/lib/liba/widget-real
/usr/share
/usr/share/doc
/usr/share/doc/liba
/usr/share/doc/liba/README
"""

LIBB_LIST = """\
/.
/usr
/usr/lib
/usr/lib/libb
/usr/lib/libb/libb.so.2
"""

WIDGET_TOOLS_METADATA = """\
Metadata-Version: 2.1
Name: Widget-Tools
Version: 1.2.0
Summary: fixture widget helpers
Requires-Dist: NumPy-Lite (>=1.0)
Requires-Dist: missing-dep ; extra == 'dev'
"""

WIDGET_TOOLS_RECORD = """\
widget_tools/__init__.py,sha256=aaaa,150
widget_tools/util.py,sha256=bbbb,250
../bin/widget-cli,sha256=cccc,30
widget_tools-1.2.0.dist-info/METADATA,sha256=dddd,0
widget_tools-1.2.0.dist-info/RECORD,,
"""

NUMPY_LITE_METADATA = """\
Metadata-Version: 2.1
Name: numpy_lite
Version: 1.0
Summary: fixture numerics
"""

NUMPY_LITE_RECORD = """\
numpy_lite/__init__.py,sha256=eeee,400
numpy_lite-1.0.dist-info/METADATA,sha256=ffff,0
numpy_lite-1.0.dist-info/RECORD,,
"""

CONDA_META = {
    "name": "condapkg",
    "version": "3.1",
    "build": "0",
    "depends": ["libother 1.0 h123"],
    "files": ["lib/libconda.so", "conda-meta/condapkg-3.1-0.json"],
}

# (relative path, content bytes) for regular files; content length is the size.
REGULAR_FILES = {
    "app/cfg.yaml": b"x" * 20,
    "app/data.bin": b"d" * 300,
    "etc/hostname": b"h" * 10,
    "usr/lib/liba/liba.so": b"A" * 120,
    "usr/lib/liba/widget-real": b"W" * 50,
    "usr/share/doc/liba/README": b"R" * 40,
    "usr/lib/libb/libb.so.2": b"B" * 200,
    "opt/pyhome/bin/widget-cli": b"c" * 30,
    "opt/pyhome/site-packages/widget_tools/__init__.py": b"w" * 150,
    "opt/pyhome/site-packages/widget_tools/util.py": b"u" * 250,
    "opt/pyhome/site-packages/numpy_lite/__init__.py": b"n" * 400,
    "opt/conda/lib/libconda.so": b"C" * 500,
    "var/lib/dpkg/status": DPKG_STATUS.encode(),
    "var/lib/dpkg/info/liba.list": LIBA_LIST.encode(),
    "var/lib/dpkg/info/libb:amd64.list": LIBB_LIST.encode(),
    "opt/pyhome/site-packages/widget_tools-1.2.0.dist-info/METADATA":
        WIDGET_TOOLS_METADATA.encode(),
    "opt/pyhome/site-packages/widget_tools-1.2.0.dist-info/RECORD":
        WIDGET_TOOLS_RECORD.encode(),
    "opt/pyhome/site-packages/numpy_lite-1.0.dist-info/METADATA":
        NUMPY_LITE_METADATA.encode(),
    "opt/pyhome/site-packages/numpy_lite-1.0.dist-info/RECORD":
        NUMPY_LITE_RECORD.encode(),
    "opt/conda/conda-meta/condapkg-3.1-0.json":
        json.dumps(CONDA_META, indent=1).encode(),
}

SYMLINKS = {
    "usr/bin/widget": "../lib/liba/widget-real",
}

# The workload's accessed set, container-absolute (see mini_trace.log).
ACCESSED = {
    "/usr/bin/widget",
    "/usr/lib/liba/liba.so",
    "/app",
    "/app/cfg.yaml",
    "/opt/pyhome/site-packages/widget_tools/__init__.py",
}

# Hand-computed retained closure for the accessed set above.
EXPECTED_RETAINED = {
    "/",
    "/app",
    "/app/cfg.yaml",
    "/usr",
    "/usr/bin",
    "/usr/bin/widget",
    "/usr/lib",
    "/usr/lib/liba",
    "/usr/lib/liba/widget-real",
    "/usr/lib/liba/liba.so",
    "/opt",
    "/opt/pyhome",
    "/opt/pyhome/site-packages",
    "/opt/pyhome/site-packages/widget_tools",
    "/opt/pyhome/site-packages/widget_tools/__init__.py",
}

RETAINED_BYTES = 20 + 50 + 120 + 150  # cfg.yaml + widget-real + liba.so + __init__.py


def total_bytes() -> int:
    return sum(len(b) for b in REGULAR_FILES.values())


def build_rootfs(dest) -> pathlib.Path:
    root = pathlib.Path(dest)
    for rel, content in REGULAR_FILES.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(content)
    for rel, target in SYMLINKS.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        os.symlink(target, path)
    return root
