#include "mergeforge/cli.hpp"
#include "mergeforge/eval.hpp"
#include "mergeforge/repair.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace mergeforge;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::dict to_dict(const WeightSet & ws) {
    py::dict out;
    for (const auto & t : ws) {
        Array a(std::vector<py::ssize_t>(t.shape.begin(), t.shape.end()));
        std::copy(t.data.begin(), t.data.end(), a.mutable_data());
        out[py::str(t.name)] = a;
    }
    return out;
}

WeightSet from_dict(const py::dict & d, const std::string & arch_id) {
    WeightSet ws(arch_id);
    for (const auto & [k, v] : d) {
        Array a = py::cast<Array>(v);
        Shape shape(a.shape(), a.shape() + a.ndim());
        ws.add(Tensor(py::cast<std::string>(k), shape, std::vector<float>(a.data(), a.data() + a.size())));
    }
    return ws;
}

LabeledBatch unlabeled(const Matrix & x) {
    return {x, std::vector<int32_t>(static_cast<size_t>(x.rows()), 0)};
}

std::string run_command(const std::string & name, const std::string & config_json, bool landscape,
                        std::optional<std::string> grid) {
    using Cmd = nlohmann::ordered_json (*)(const cli::RunConfig &, const cli::CommandOptions &);
    static const std::map<std::string, Cmd> commands = {
        {"pretrain", cli::cmd_pretrain}, {"finetune", cli::cmd_finetune}, {"align", cli::cmd_align},
        {"search", cli::cmd_search},     {"merge", cli::cmd_merge},       {"tact", cli::cmd_tact},
        {"eval", cli::cmd_eval},
    };
    const auto it = commands.find(name);
    if (it == commands.end()) {
        throw Error(Errc::invalid_argument, "unknown command '" + name + "'");
    }
    cli::CommandOptions opts;
    opts.landscape = landscape;
    opts.grid      = std::move(grid);
    const auto cfg = cli::RunConfig::from_json(nlohmann::json::parse(config_json));
    py::gil_scoped_release release;
    return it->second(cfg, opts).dump();
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Model merging toolkit: alignment, task-vector merging and activation correction.";

    static py::exception<Error> error(m, "MergeforgeError", PyExc_RuntimeError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) {
                std::rethrow_exception(p);
            }
        } catch (const Error & e) {
            py::object exc = py::handle(error.ptr())(e.what());
            py::setattr(exc, "code", py::str(errc_name(e.code())));
            PyErr_SetObject(error.ptr(), exc.ptr());
        }
    });

    py::class_<Architecture>(m, "Architecture")
        .def_property_readonly("id", &Architecture::id)
        .def_property_readonly("in_dim", &Architecture::in_dim)
        .def_property_readonly("feature_dim", &Architecture::feature_dim)
        .def_property_readonly("modules",
                               [](const Architecture & a) {
                                   std::vector<std::string> names;
                                   for (const auto & mod : a.modules()) {
                                       names.push_back(mod.name);
                                   }
                                   return names;
                               })
        .def_property_readonly("perm_groups",
                               [](const Architecture & a) {
                                   std::map<std::string, int64_t> sizes;
                                   for (const auto & g : a.perm_groups()) {
                                       sizes[g.name] = g.size;
                                   }
                                   return sizes;
                               })
        .def("encoder_layout", &Architecture::encoder_layout)
        .def("init_encoder", [](const Architecture & a, uint64_t seed) { return to_dict(a.init_encoder(seed)); })
        .def("init_head",
             [](const Architecture & a, int64_t n_classes, uint64_t seed) { return to_dict(a.init_head(n_classes, seed)); })
        .def("__repr__", [](const Architecture & a) { return "<Architecture " + a.id() + ">"; });

    m.def("make_mlp", &make_mlp, py::arg("in_dim"), py::arg("hidden"), py::arg("n_classes"),
          py::arg("layer_norm") = true);

    m.def(
        "load_weights",
        [](const std::filesystem::path & path) {
            const WeightSet ws = load_weights(path);
            return py::make_tuple(ws.arch_id(), to_dict(ws));
        },
        py::arg("path"));
    m.def(
        "save_weights",
        [](const std::filesystem::path & path, const std::string & arch_id, const py::dict & tensors) {
            save_weights(from_dict(tensors, arch_id), path);
        },
        py::arg("path"), py::arg("arch_id"), py::arg("tensors"));

    m.def(
        "forward",
        [](const Architecture & arch, const py::dict & encoder, const py::dict & head, const Matrix & x) {
            return forward(arch, from_dict(encoder, arch.id()), from_dict(head, arch.id()), x);
        },
        py::arg("arch"), py::arg("encoder"), py::arg("head"), py::arg("x"));

    m.def("linear_sum_assignment", &linear_sum_assignment, py::arg("G"));

    m.def(
        "weight_matching",
        [](const Architecture & arch, const py::dict & a, const py::dict & b, uint64_t seed, int max_sweeps) {
            const auto r = weight_matching(from_dict(a, arch.id()), from_dict(b, arch.id()), arch, seed, max_sweeps);
            py::dict out;
            out["perm"]             = r.perm.perms;
            out["objective_trace"]  = r.objective_trace;
            out["sweeps"]           = r.sweeps;
            out["initial_distance"] = r.initial_distance;
            out["final_distance"]   = r.final_distance;
            return out;
        },
        py::arg("arch"), py::arg("a"), py::arg("b"), py::arg("seed") = 0, py::arg("max_sweeps") = 100);

    m.def(
        "apply_permutation",
        [](const Architecture & arch, const py::dict & ws, const std::map<std::string, Permutation> & perm) {
            PermutationMap pm{perm};
            check_map(pm, arch);
            return to_dict(apply_permutation(from_dict(ws, arch.id()), arch, pm));
        },
        py::arg("arch"), py::arg("weights"), py::arg("perm"));

    m.def(
        "_merge",
        [](const py::dict & init, const std::vector<std::tuple<std::string, py::dict, py::dict>> & experts,
           const std::string & config_json) {
            const std::string arch_id = "python";
            std::vector<ExpertRecord> records;
            for (const auto & [task, enc, head] : experts) {
                records.push_back({from_dict(enc, arch_id), from_dict(head, arch_id), task, "f0"});
            }
            const auto cfg    = MergeConfig::from_json(nlohmann::json::parse(config_json));
            const auto bundle = local_merge(from_dict(init, arch_id), records, cfg);
            py::dict encoders;
            for (const auto & t : bundle.task_ids) {
                encoders[py::str(t)] = to_dict(bundle.encoder_for(t));
            }
            py::dict out;
            out["method"]   = bundle.method;
            out["shared"]   = to_dict(bundle.shared);
            out["encoders"] = encoders;
            return out;
        },
        py::arg("init"), py::arg("experts"), py::arg("config_json"));

    py::class_<TactBundle>(m, "TactBundle")
        .def_readonly("task_id", &TactBundle::task_id)
        .def_readonly("epsilon", &TactBundle::epsilon)
        .def("save", [](const TactBundle & b, const std::string & arch_id,
                        const std::filesystem::path & path) { save_tact(b, arch_id, path); })
        .def_static("load", &load_tact);

    m.def(
        "tact_correct",
        [](const Architecture & arch, const py::dict & merged, const py::dict & expert, const Matrix & x,
           const std::string & task_id, double epsilon) {
            const WeightSet enc = from_dict(merged, arch.id());
            ActivationStats target = compute_stats(arch, from_dict(expert, arch.id()), unlabeled(x));
            return tact_correct_with_target(arch, enc, task_id, std::move(target), unlabeled(x), epsilon);
        },
        py::arg("arch"), py::arg("merged"), py::arg("expert"), py::arg("x"), py::arg("task_id") = "task",
        py::arg("epsilon") = kDefaultEpsilon);

    m.def(
        "corrected_forward",
        [](const Architecture & arch, const py::dict & encoder, const py::dict & head, const TactBundle & bundle,
           const Matrix & x) {
            return corrected_forward(arch, from_dict(encoder, arch.id()), from_dict(head, arch.id()), bundle, x);
        },
        py::arg("arch"), py::arg("encoder"), py::arg("head"), py::arg("bundle"), py::arg("x"));

    m.def("_run_command", &run_command, py::arg("name"), py::arg("config_json"), py::arg("landscape") = false,
          py::arg("grid") = std::nullopt);
}
