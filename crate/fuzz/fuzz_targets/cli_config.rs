#![no_main]

use libfuzzer_sys::fuzz_target;

use lsfm_cli::{Command, RunConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for command in [Command::Simulate, Command::Fit, Command::Diagnose, Command::SimStudy] {
        if let Ok(cfg) = RunConfig::resolve(command, Some(text), &[]) {
            let again = RunConfig::resolve(command, Some(&cfg.manifest(&[])), &[]).unwrap();
            assert_eq!(again, cfg);
        }
    }
});
