#![no_main]

use cardcount_cli::config::{
    parse, AblateFileConfig, EvalFileConfig, GenDataConfig, GuideFileConfig, SizeBiasFileConfig,
    ThresholdFileConfig, TrainFileConfig,
};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = parse::<GenDataConfig>(text) {
        let _ = cfg.scene.validate();
    }
    let _ = parse::<TrainFileConfig>(text).map(|c| c.train.validate());
    let _ = parse::<EvalFileConfig>(text);
    let _ = parse::<SizeBiasFileConfig>(text);
    let _ = parse::<ThresholdFileConfig>(text);
    let _ = parse::<GuideFileConfig>(text).map(|c| c.suite.guidance.validate());
    let _ = parse::<AblateFileConfig>(text);
});
