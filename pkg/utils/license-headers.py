#  Licensed under the Apache License, Version 2.0 (the "License"); you may
#  not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
# 	http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing,
#  software distributed under the License is distributed on an
#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
#  KIND, either express or implied.  See the License for the
#  specific language governing permissions and limitations
#  under the License.

"""Checks that every Python source file starts with the license header.

    python utils/license-headers.py check|fix PATH...

'fix' inserts the header where it's missing, 'check' exits with status 1
listing the files 'fix' would change.
"""

import os
import sys
from typing import Iterator, List, Sequence

#: Lines that may come before the header, like a shebang
PREAMBLE_LINES = ("#!/usr/bin/env python\n", "# -*- coding: utf-8 -*-\n")
LICENSE_HEADER = [
    '#  Licensed under the Apache License, Version 2.0 (the "License"); you may\n',
    "#  not use this file except in compliance with the License.\n",
    "#  You may obtain a copy of the License at\n",
    "#\n",
    "# 	http://www.apache.org/licenses/LICENSE-2.0\n",
    "#\n",
    "#  Unless required by applicable law or agreed to in writing,\n",
    "#  software distributed under the License is distributed on an\n",
    '#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY\n',
    "#  KIND, either express or implied.  See the License for the\n",
    "#  specific language governing permissions and limitations\n",
    "#  under the License.\n",
    "\n",
]


def python_files(sources: Sequence[str]) -> Iterator[str]:
    for source in sources:
        if os.path.isfile(source):
            if source.endswith(".py"):
                yield source
            continue
        for root, _, filenames in os.walk(source):
            for filename in sorted(filenames):
                if filename.endswith(".py"):
                    yield os.path.join(root, filename)


def header_start(lines: List[str]) -> int:
    i = 0
    while i < len(lines) and lines[i] in PREAMBLE_LINES:
        i += 1
    return i


def has_header(filepath: str) -> bool:
    with open(filepath, encoding="utf-8") as f:
        lines = f.readlines()
    start = header_start(lines)
    return lines[start : start + len(LICENSE_HEADER)] == LICENSE_HEADER


def add_header(filepath: str) -> None:
    with open(filepath, encoding="utf-8") as f:
        lines = f.readlines()
    start = header_start(lines)
    lines[start:start] = LICENSE_HEADER
    with open(filepath, mode="w", encoding="utf-8") as f:
        f.write("".join(lines))
    print(f"Fixed {os.path.relpath(filepath, os.getcwd())}")


def main() -> None:
    mode = sys.argv[1]
    if mode not in ("fix", "check"):
        sys.exit(f"Unknown mode '{mode}', expected 'fix' or 'check'")
    sources = [os.path.abspath(x) for x in sys.argv[2:]]
    missing = [path for path in python_files(sources) if not has_header(path)]

    if mode == "fix":
        for filepath in missing:
            add_header(filepath)
    elif missing:
        print("No license header found in:")
        for filepath in missing:
            print(f" - {os.path.relpath(filepath, os.getcwd())}")
        sys.exit(1)
    else:
        print("All files had license header")


if __name__ == "__main__":
    main()
