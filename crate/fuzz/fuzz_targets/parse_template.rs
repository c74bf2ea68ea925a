#![no_main]

use libfuzzer_sys::fuzz_target;
use promptta::encoder::{Prompt, PromptTemplate};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(template) = PromptTemplate::parse(text) {
            let _ = template.render(&Prompt::domain_class("photo", "dog"));
        }
    }
});
