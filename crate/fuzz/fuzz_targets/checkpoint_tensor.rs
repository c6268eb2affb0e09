// SPDX-License-Identifier: Apache-2.0
#![no_main]

use kinaema_core::fuzzing;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| fuzzing::checkpoint_tensor(data));
