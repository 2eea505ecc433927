#pragma once

namespace pil {

/// Entry point of the `pil` tool: gen, train, eval, actmap, report.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime failure.
/// Diagnostics go to stderr; results only to files.
int run_cli(int argc, const char* const* argv);

}  // namespace pil
