import { makeApi } from "./api.js";
import { initApp } from "./ui.js";

initApp(document, makeApi());
