use evoedit::icg::{classify_instruction, compile, generate_caption, refine_caption, REFINEMENT_SUFFIX};
use evoedit::synthworld::{make_triplet, EditTask};

#[test]
fn published_cues_compile_verbatim() {
    let cases = [
        ("add a red balloon above the boy", "The red balloon gradually appears above the boy, while everything else remains still."),
        ("remove the trash can on the left", "The trash can on the left gradually fades away, while everything else remains still."),
        ("replace the mug with a teacup", "The mug gradually turns into a teacup in place, while pose, lighting, and surroundings remain unchanged."),
        ("change background to a beach", "The background slowly transforms into a beach scene, while the main subject and foreground remain unchanged."),
        ("make the car blue", "The car's body color gradually shifts to blue, while reflections and all other elements remain consistent."),
        ("turn the sofa into leather", "The sofa's texture gradually becomes leather, while geometry and the rest of the scene remain unchanged."),
        ("change text to `OPEN' ", "The sign's text gradually changes to \"OPEN\", while layout and surrounding pixels remain unchanged."),
        ("raise the person's right hand", "The person's right forearm slowly raises, while the rest of the body and scene remain steady."),
        ("smooth skin and brighten eyes", "Facial skin is gently smoothed and eyes brightened over time, while identity and other details remain unchanged."),
        ("convert to watercolor style", "The scene gradually adopts a watercolor style, while composition and content remain unchanged."),
        ("apply warm cinematic grade", "The image gradually shifts to a warm cinematic grade, while structure and content remain unchanged."),
    ];
    for ((instr, want), task) in cases.iter().zip(EditTask::ALL) {
        assert_eq!(classify_instruction(instr).unwrap(), task, "{instr}");
        let c = generate_caption(instr, task);
        assert_eq!(c.text, *want);
        assert!(!c.generic);
    }
}

#[test]
fn exemplar_sentences() {
    let c = generate_caption("Remove the object", EditTask::SubjectRemoval);
    assert_eq!(c.text, "The object gradually fades away while everything else remains still.");
    let c = generate_caption("Change the background to a forest", EditTask::BackgroundChange);
    assert_eq!(c.text, "The background slowly transforms into a dense forest, with all other elements unchanged.");
}

#[test]
fn synthetic_instructions_round_trip() {
    for task in EditTask::ALL {
        for seed in 0..40 {
            let t = make_triplet(seed, task, 32).unwrap();
            assert_eq!(classify_instruction(&t.instruction).unwrap(), task, "{}", t.instruction);
            let cap = generate_caption(&t.instruction, task);
            assert!(!cap.generic, "{}", t.instruction);
            assert_eq!(classify_instruction(&cap.text).unwrap(), task, "{}", cap.text);
            let refined = refine_caption(&cap).unwrap();
            assert_eq!(classify_instruction(&refined.text).unwrap(), task, "{}", refined.text);
            assert_eq!(compile(&t.instruction).unwrap(), refined);
            assert!(refined.text.ends_with(REFINEMENT_SUFFIX));
        }
    }
}
