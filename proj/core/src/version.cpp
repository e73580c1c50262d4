// SPDX-License-Identifier: Apache-2.0
namespace pemma {
const char* version() { return "1.0.0"; }
}
