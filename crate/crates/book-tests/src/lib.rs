//! The guide's chapters, each attached to an empty module so that rustdoc
//! runs their code blocks.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(autodiff, "autodiff.md");
chapter!(terrain, "terrain.md");
chapter!(model, "model.md");
chapter!(planning, "planning.md");
chapter!(adaptation, "adaptation.md");
chapter!(missions, "missions.md");
chapter!(cli, "cli.md");
